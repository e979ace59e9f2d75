#!/usr/bin/env python3
"""
Dependency Checker for the wire-harness picking simulator.
Verifies packages, config files and test data, then runs one scripted scenario.
"""

import sys
import os
import importlib
from pathlib import Path
import time

try:
    from dotenv import load_dotenv
    load_dotenv()
except ImportError:
    pass

ROOT = Path(__file__).resolve().parent

# package name -> import name
REQUIRED_PACKAGES = {
    'numpy': 'numpy',
    'scipy': 'scipy',
    'networkx': 'networkx',
    'opencv-python-headless': 'cv2',
    'python-dotenv': 'dotenv',
    'pydantic': 'pydantic',
    'fastapi': 'fastapi',
    'uvicorn': 'uvicorn',
    'pytest': 'pytest',
    'hypothesis': 'hypothesis',
}

REQUIRED_FILES = [
    'config/default.env',
    'testdata/traces/corpus.json',
    'testdata/scenarios/isolated.json',
]


def check_python_packages():
    """Check if all required Python packages are installed."""
    missing_packages = []

    print("🔍 Checking Python packages...")
    for package, import_name in REQUIRED_PACKAGES.items():
        try:
            importlib.import_module(import_name)
            print(f"  ✅ {package}")
        except ImportError:
            print(f"  ❌ {package} - MISSING")
            missing_packages.append(package)

    if missing_packages:
        print(f"\n⚠️  Missing packages: {', '.join(missing_packages)}")
        print("Run: pip install -r requirements.txt")
        return False

    import numpy
    if int(numpy.__version__.split('.')[0]) >= 2:
        print(f"  ⚠️  numpy {numpy.__version__} found, requirements pin numpy<2.0")

    print("✅ All Python packages are installed!")
    return True


def check_files():
    print("\n📁 Checking config and test data...")
    missing = [p for p in REQUIRED_FILES if not (ROOT / p).exists()]
    for p in REQUIRED_FILES:
        print(f"  {'❌' if p in missing else '✅'} {p}")
    return not missing


def check_config():
    """Load the controller config the CLI would use."""
    print("\n🔧 Checking controller config...")
    try:
        from core_types import load_config
        path = os.getenv('PICKING_CONFIG') or str(ROOT / 'config' / 'default.env')
        cfg = load_config(path)
        print(f"  ✅ {path}: F_stop={cfg.f_stop} F_fail={cfg.f_fail} loop_cap={cfg.loop_cap}")
        return True
    except Exception as e:
        print(f"  ❌ Config failed to load: {e}")
        return False


def check_scenario():
    print("\n🎬 Running smoke scenario...")
    try:
        from harness import run_scenario

        start_time = time.time()
        result = run_scenario(ROOT / 'testdata' / 'scenarios' / 'isolated.json')
        elapsed = time.time() - start_time
        if not result.passed:
            for m in result.mismatches:
                print(f"  ❌ {m}")
            return False
        print(f"  ✅ {result.name}: {result.record.outcome.value} in {elapsed:.2f} seconds")
        return True
    except Exception as e:
        print(f"  ❌ Scenario failed: {e}")
        return False


def main():
    print("🚀 Wire-Harness Picking - Dependency Checker")
    print("=" * 50)

    all_checks_passed = check_python_packages()
    if not check_files():
        all_checks_passed = False

    # Only import the package once its dependencies are known to be present
    if all_checks_passed:
        if not check_config():
            all_checks_passed = False
        if not check_scenario():
            all_checks_passed = False

    print("\n" + "=" * 50)
    if all_checks_passed:
        print("🎉 All dependencies are ready!")
        print("\nTo run a task:")
        print("  python run_all.py run --task Emptying --policy OursG --objects 8")
        print("\nTo start the run service:")
        print("  python -m uvicorn server:app --host 0.0.0.0 --port 8000 --reload")
    else:
        print("❌ Some dependencies are missing. Please fix the issues above.")
        sys.exit(1)


if __name__ == "__main__":
    main()
