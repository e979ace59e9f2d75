import os
import re
import sys
import csv
import time
import json
import shutil
import asyncio
from pathlib import Path
from typing import Optional, Dict, Any, List
from contextlib import asynccontextmanager

from fastapi import FastAPI, HTTPException, BackgroundTasks, Header
from fastapi.middleware.cors import CORSMiddleware
from pydantic import BaseModel, Field
from dotenv import load_dotenv

from core_types import Policy
from harness import Task
from simulator import ObjectProfile

load_dotenv()

# Optional settings
API_KEY = os.getenv("API_KEY", "")  # optional auth key
RUNS_DIR = Path(os.getenv("RUNS_DIR", "data"))
RUNS_HISTORY_FILE = os.getenv("RUNS_HISTORY_FILE", "runs_history.json")

# ─────────────────────────────────────────────
# FastAPI app
# ─────────────────────────────────────────────

@asynccontextmanager
async def lifespan(app: FastAPI):
    print("🚀 Starting Picking Run Service...")
    load_run_history()
    yield
    print("💾 Saving run history...")
    save_run_history()
    print("👋 Shutting down Picking Run Service...")

app = FastAPI(title="Picking Run Service", lifespan=lifespan)

app.add_middleware(
    CORSMiddleware,
    allow_origins=["*"],
    allow_credentials=False,
    allow_methods=["GET", "POST", "OPTIONS", "DELETE"],
    allow_headers=["*"]
)

# ─────────────────────────────────────────────
# Models
# ─────────────────────────────────────────────

class RunRequest(BaseModel):
    task: Task = Task.EMPTYING
    policy: Policy = Policy.OURS_G
    objects: int = Field(default=8, ge=0)
    profile: ObjectProfile = ObjectProfile.MEDIUM_74CM
    episodes: int = Field(default=1, ge=1)
    seed: int = Field(default=0, ge=0)
    max_attempts: Optional[int] = Field(default=None, ge=1)

class RunStatus(BaseModel):
    run_id: str
    status: str  # "running", "completed", "failed", "not_found"
    logs: List[str]
    request: Optional[Dict[str, Any]] = None
    start_time: Optional[str] = None
    end_time: Optional[str] = None
    out_dir: Optional[str] = None

run_status: Dict[str, RunStatus] = {}

def save_run_history():
    """Save run status to disk."""
    try:
        history_data = {run_id: status.model_dump() for run_id, status in run_status.items()}
        with open(RUNS_HISTORY_FILE, 'w') as f:
            json.dump(history_data, f, indent=2)
    except OSError as e:
        print(f"❌ Error saving run history: {e}")

def load_run_history():
    """Load run status from disk."""
    global run_status
    try:
        if os.path.exists(RUNS_HISTORY_FILE):
            with open(RUNS_HISTORY_FILE, 'r') as f:
                history_data = json.load(f)
            run_status = {run_id: RunStatus(**data) for run_id, data in history_data.items()}
            print(f"✅ Run history loaded from {RUNS_HISTORY_FILE} ({len(run_status)} runs)")
        else:
            print(f"📝 No existing run history found at {RUNS_HISTORY_FILE}")
    except (OSError, ValueError) as e:
        print(f"❌ Error loading run history: {e}")
        run_status = {}

def check_api_key(x_api_key: Optional[str]):
    if API_KEY and x_api_key != API_KEY:
        raise HTTPException(status_code=401, detail="Unauthorized")

RUN_ID_PATTERN = re.compile(r"^\d{8}_\d{6}(_\d+)?$")

def run_dir(run_id: str) -> Path:
    """Output directory of a run; only ids minted by new_run_id resolve inside RUNS_DIR."""
    if not RUN_ID_PATTERN.match(run_id):
        raise HTTPException(status_code=400, detail=f"Invalid run id: {run_id}")
    root = RUNS_DIR.resolve()
    status = run_status.get(run_id)
    path = (Path(status.out_dir) if status and status.out_dir else RUNS_DIR / run_id).resolve()
    if path == root or root not in path.parents:
        raise HTTPException(status_code=400, detail=f"Run {run_id} is outside {RUNS_DIR}")
    return path

def new_run_id() -> str:
    run_id = time.strftime("%Y%m%d_%H%M%S")
    k = 1
    while (run_id if k == 1 else f"{run_id}_{k}") in run_status:
        k += 1
    return run_id if k == 1 else f"{run_id}_{k}"

def build_command(req: RunRequest, out_dir: Path) -> List[str]:
    cmd = [
        sys.executable, "run_all.py", "run",
        "--task", req.task.value,
        "--policy", req.policy.value,
        "--objects", str(req.objects),
        "--profile", req.profile.value,
        "--episodes", str(req.episodes),
        "--seed", str(req.seed),
        "--out-dir", str(out_dir),
    ]
    if req.max_attempts is not None:
        cmd += ["--max-attempts", str(req.max_attempts)]
    return cmd

# ─────────────────────────────────────────────
# Run management
# ─────────────────────────────────────────────

async def run_picking_background(run_id: str, req: RunRequest):
    """Run `run_all.py run` as a subprocess and stream its output into the run log."""
    status = run_status[run_id]
    try:
        cmd = build_command(req, Path(status.out_dir))
        status.logs.append(f"=== Running: {' '.join(cmd)} ===")
        process = await asyncio.create_subprocess_exec(
            *cmd,
            stdout=asyncio.subprocess.PIPE,
            stderr=asyncio.subprocess.STDOUT,
            cwd=Path(__file__).resolve().parent,
            env=os.environ.copy()
        )
        while True:
            line = await process.stdout.readline()
            if not line:
                break
            text = line.decode().strip()
            if text:
                status.logs.append(text)
        await process.wait()

        if process.returncode != 0:
            status.logs.append(f"Error in run_all.py (exit code: {process.returncode})")
            status.status = "failed"
        else:
            status.status = "completed"
            status.logs.append(f"✅ Done | run_id: {run_id} | Stored in: {status.out_dir}")
    except Exception as e:
        status.status = "failed"
        status.logs.append(f"Run failed with error: {e}")
    finally:
        status.end_time = time.strftime("%Y-%m-%d %H:%M:%S")
        save_run_history()

# ─────────────────────────────────────────────
# API Endpoints
# ─────────────────────────────────────────────

@app.get("/")
def root():
    return {"message": "Picking Run Service", "status": "running"}

@app.get("/status")
def get_status():
    running = sum(1 for s in run_status.values() if s.status == "running")
    return {
        "server": "running",
        "runs_dir": str(RUNS_DIR),
        "runs": len(run_status),
        "running": running,
        "auth": bool(API_KEY),
    }

@app.post("/runs/start")
async def start_run(req: RunRequest, background_tasks: BackgroundTasks, x_api_key: Optional[str] = Header(default=None)):
    """Start a new picking run."""
    check_api_key(x_api_key)
    run_id = new_run_id()
    out_dir = RUNS_DIR / run_id
    run_status[run_id] = RunStatus(
        run_id=run_id,
        status="running",
        logs=[f"🚀 Starting run | run_id: {run_id}", f"📂 Output dir: {out_dir}"],
        request=req.model_dump(mode="json"),
        start_time=time.strftime("%Y-%m-%d %H:%M:%S"),
        out_dir=str(out_dir),
    )
    save_run_history()
    background_tasks.add_task(run_picking_background, run_id, req)
    return {"run_id": run_id, "message": f"Run started with run_id: {run_id}", "status": "started"}

@app.get("/runs/status/{run_id}")
def get_run_status(run_id: str, x_api_key: Optional[str] = Header(default=None)):
    check_api_key(x_api_key)
    if run_id not in run_status:
        return RunStatus(run_id=run_id, status="not_found", logs=["Run not found"])
    return run_status[run_id]

@app.get("/runs/history")
def get_run_history(x_api_key: Optional[str] = Header(default=None)):
    check_api_key(x_api_key)
    history = [
        {
            "run_id": s.run_id,
            "status": s.status,
            "request": s.request,
            "start_time": s.start_time,
            "end_time": s.end_time,
        }
        for s in run_status.values()
    ]
    history.sort(key=lambda x: x["run_id"], reverse=True)
    return {"history": history}

@app.get("/runs/{run_id}/summary")
def get_run_summary(run_id: str, x_api_key: Optional[str] = Header(default=None)):
    """summary.csv rows of a finished run."""
    check_api_key(x_api_key)
    summary = run_dir(run_id) / "summary.csv"
    if not summary.exists():
        raise HTTPException(status_code=404, detail=f"No summary for run {run_id}")
    with summary.open(newline="", encoding="utf-8") as f:
        rows = list(csv.DictReader(f))
    return {"run_id": run_id, "summary": rows}

@app.delete("/runs/{run_id}")
def delete_run(run_id: str, x_api_key: Optional[str] = Header(default=None)):
    """Delete a run and its output directory."""
    check_api_key(x_api_key)
    data_dir = run_dir(run_id)
    if run_id not in run_status:
        raise HTTPException(status_code=404, detail=f"Run {run_id} not found")
    run_status.pop(run_id)
    save_run_history()
    if data_dir.exists():
        shutil.rmtree(data_dir)
    return {"message": f"Run {run_id} deleted"}

if __name__ == "__main__":
    import uvicorn
    uvicorn.run(app, host="0.0.0.0", port=int(os.getenv("PORT", "8000")))
