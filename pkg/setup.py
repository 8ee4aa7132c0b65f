#!/usr/bin/env python3
"""
Setup script for the Pre-training Toolkit
Installs the numeric stack, writes .env, prepares the runs directory and
optionally the bundled synthetic corpus with its vocabulary.
"""

import argparse
import os
import shutil
import subprocess
import sys

NUMERIC_STACK = ["numpy", "scipy", "faiss", "pandas"]


def check_python_version():
    """The toolkit supports Python 3.9 and newer."""
    if sys.version_info < (3, 9):
        print(f"❌ Python {sys.version.split()[0]} is too old; the toolkit needs 3.9+")
        return False
    print(f"✅ Python {sys.version.split()[0]}")
    return True


def install_dependencies(skip=False):
    """pip-install requirements.txt, then make sure the numeric stack imports."""
    if skip:
        print("⏭️  Skipping pip install")
    else:
        print("📦 Installing numpy, faiss-cpu, pandas and the rest of requirements.txt...")
        try:
            subprocess.check_call([sys.executable, "-m", "pip", "install", "-r", "requirements.txt"])
        except subprocess.CalledProcessError as e:
            print(f"❌ pip failed with exit code {e.returncode}")
            return False

    missing = []
    for package in NUMERIC_STACK:
        try:
            module = __import__(package)
            print(f"  ✅ {package} {getattr(module, '__version__', '')}".rstrip())
        except ImportError:
            missing.append(package)
            print(f"  ❌ {package}")
    return not missing


def setup_environment(assume_yes=False):
    """Create .env from env_template.txt; an existing .env is kept unless confirmed."""
    if not os.path.exists("env_template.txt"):
        print("❌ env_template.txt not found")
        return False
    if os.path.exists(".env"):
        answer = "y" if assume_yes else input("⚠️  .env exists. Replace it with the template? (y/N): ")
        if answer.lower() != "y":
            print("🔧 Keeping the existing .env")
            return True
    shutil.copy("env_template.txt", ".env")
    print("✅ Wrote .env (PRETRAIN_RUNS_DIR, PRETRAIN_SEED, PRETRAIN_THREADS, PRETRAIN_LOG_LEVEL)")
    return True


def prepare_runs_dir():
    """Create the directory every command writes its timestamped run directory into."""
    import config

    os.makedirs(config.RUNS_DIR, exist_ok=True)
    print(f"📂 Runs directory: {config.RUNS_DIR} (seed {config.DEFAULT_SEED}, {config.DEFAULT_THREADS} thread(s))")
    return config.RUNS_DIR


def prepare_corpus_and_vocab(runs_dir):
    """Generate the bundled corpus and build its vocab; returns their paths."""
    from pretraining.cli import run_command
    from pretraining.errors import PretrainingError

    print("📚 Generating the bundled synthetic corpus and its vocabulary...")
    try:
        corpus = run_command("gen-corpus", {"out": runs_dir}) / "corpus.txt"
        vocab = run_command("build-vocab", {"out": runs_dir, "corpus": str(corpus)}) / "vocab.txt"
    except PretrainingError as e:
        print(f"❌ {e}")
        return None
    print(f"  ✅ corpus: {corpus}")
    print(f"  ✅ vocab:  {vocab}")
    return corpus, vocab


def run_installation_check():
    print("\n🧪 Running the installation check...")
    result = subprocess.run([sys.executable, "test_installation.py"], capture_output=True, text=True)
    print(result.stdout)
    if result.returncode != 0 and result.stderr:
        print(result.stderr)
    return result.returncode == 0


def main():
    parser = argparse.ArgumentParser(description="Install and prepare the pre-training toolkit")
    parser.add_argument("--skip-install", action="store_true", help="do not run pip")
    parser.add_argument("--with-corpus", action="store_true", help="also generate the corpus and vocab")
    parser.add_argument("--yes", action="store_true", help="answer yes to every prompt")
    args = parser.parse_args()

    print("🧪 Pre-training Toolkit Setup")
    print("=" * 40)

    if not check_python_version():
        sys.exit(1)
    if not install_dependencies(skip=args.skip_install):
        print("❌ The numeric stack is incomplete; see requirements.txt")
        sys.exit(1)
    if not setup_environment(assume_yes=args.yes):
        sys.exit(1)
    runs_dir = prepare_runs_dir()

    prepared = None
    want_corpus = args.with_corpus or (not args.yes and input("Generate the bundled corpus now? (y/N): ").lower() == "y")
    if want_corpus:
        prepared = prepare_corpus_and_vocab(runs_dir)

    if not run_installation_check():
        print("\n⚠️  Installation check reported problems; see the output above")
        sys.exit(1)

    print("\n✅ Setup complete")
    print("\n🚀 Next steps:")
    if prepared is not None:
        corpus, vocab = prepared
        print(f"   python run.py train-embeddings --corpus {corpus} --vocab {vocab}")
        print(f"   python run.py pretrain --corpus {corpus} --vocab {vocab} --objective rts")
    else:
        print("   python run.py gen-corpus")
        print("   python run.py build-vocab --corpus <run dir>/corpus.txt")
    print("   python run.py flops")
    print("   pytest")


if __name__ == "__main__":
    main()
