#!/usr/bin/env python3
"""
Test script to verify the Pre-training Toolkit installation
Checks dependencies, imports, layout and configuration.
Runs under pytest or directly as a script.
"""

import os

PACKAGES = [
    ("numpy", "NumPy"),
    ("scipy", "SciPy"),
    ("faiss", "FAISS (CPU)"),
    ("pandas", "Pandas"),
    ("pydantic", "Pydantic"),
    ("dotenv", "Python-dotenv"),
    ("tqdm", "tqdm"),
]

MODULES = [
    ("pretraining.corpus", "Corpus"),
    ("pretraining.embed", "Embeddings"),
    ("pretraining.cluster", "Clustering"),
    ("pretraining.crts", "Count-matrix sampler"),
    ("pretraining.objectives", "Objectives"),
    ("pretraining.model", "Transformer"),
    ("pretraining.train", "Trainer"),
    ("pretraining.flops", "FLOPs estimator"),
    ("pretraining.sweep", "Cluster/gamma sweep"),
    ("pretraining.cli", "Command line"),
]

REQUIRED_FILES = [
    "requirements.txt",
    "config.py",
    "env_template.txt",
    "README.md",
    "run.py",
    "pretraining/__init__.py",
    "pretraining/errors.py",
    "pretraining/settings.py",
] + [name.replace(".", "/") + ".py" for name, _ in MODULES]


def check_imports():
    """Return the packages that cannot be imported."""
    print("🔍 Testing package imports...")
    failed = []
    for package, name in PACKAGES:
        try:
            __import__(package)
            print(f"  ✅ {name}")
        except ImportError:
            print(f"  ❌ {name}")
            failed.append(package)
    return failed


def check_modules():
    """Return the toolkit modules that fail to import."""
    print("\n🔧 Testing toolkit modules...")
    failed = []
    for module, name in MODULES:
        try:
            __import__(module)
            print(f"  ✅ {name}")
        except Exception as e:
            print(f"  ❌ {name}: {e}")
            failed.append(module)
    return failed


def check_directory_structure():
    """Return the required files that are missing."""
    print("\n📁 Testing directory structure...")
    root = os.path.dirname(os.path.abspath(__file__))
    missing = []
    for file_path in REQUIRED_FILES:
        if os.path.exists(os.path.join(root, file_path)):
            print(f"  ✅ {file_path}")
        else:
            print(f"  ❌ {file_path}")
            missing.append(file_path)
    return missing


def check_config():
    """Configuration loads and its grids contain the defaults."""
    print("\n🔧 Testing configuration...")
    try:
        import config
    except Exception as e:
        print(f"  ❌ Configuration error: {e}")
        return False
    ok = config.DEFAULT_CLUSTER_COUNT in config.CLUSTER_COUNT_GRID and config.DEFAULT_GAMMA in config.GAMMA_GRID
    print(f"  {'✅' if ok else '❌'} Configuration loaded")
    print(f"  📂 Runs directory: {config.RUNS_DIR}")
    print(f"  🎲 Default seed: {config.DEFAULT_SEED}")
    return ok


def test_imports():
    assert check_imports() == []


def test_toolkit_modules():
    assert check_modules() == []


def test_directory_structure():
    assert check_directory_structure() == []


def test_config():
    assert check_config()


def main():
    """Main test function."""
    print("🧪 Pre-training Toolkit - Installation Test")
    print("=" * 50)

    all_passed = True

    missing_files = check_directory_structure()
    if missing_files:
        print(f"\n❌ Missing files: {missing_files}")
        all_passed = False

    failed_imports = check_imports()
    if failed_imports:
        print(f"\n❌ Failed imports: {failed_imports}")
        print("📦 Install missing packages with: pip install -r requirements.txt")
        all_passed = False

    if not check_config():
        all_passed = False

    failed_modules = check_modules()
    if failed_modules:
        print(f"\n❌ Failed toolkit modules: {failed_modules}")
        all_passed = False

    print("\n" + "=" * 50)
    if all_passed:
        print("✅ All tests passed! Installation is complete.")
        print("\n🚀 You can now run the toolkit:")
        print("   python run.py --help")
    else:
        print("❌ Some tests failed. Please fix the issues above.")
        print("\n📋 Common solutions:")
        print("   1. Install missing packages: pip install -r requirements.txt")
        print("   2. Copy env_template.txt to .env")
        print("   3. Check that all files are present")

    print("\n📖 For more information, see README.md")
    return 0 if all_passed else 1


if __name__ == "__main__":
    raise SystemExit(main())
