#!/usr/bin/env python3
"""
Setup check for the behavior tuning pipeline.
Run this before the first pipeline run to catch missing packages or a broken environment.
"""

import sys


def check_imports():
    """Check that the third-party and local modules import."""
    print("🔍 Checking imports...")

    for package in ("numpy", "pydantic", "dotenv", "sklearn"):
        try:
            __import__(package)
            print(f"✅ {package} imported successfully")
        except ImportError as e:
            print(f"❌ Failed to import {package}: {e}")
            return False

    try:
        from behavior_catalog import get_supported_behaviors
        print("✅ Local behavior catalog imported successfully")
        print(f"   Found {len(get_supported_behaviors())} catalog behaviors")
    except ImportError as e:
        print(f"❌ Failed to import local behavior catalog: {e}")
        return False

    return True


def check_environment():
    """Check .env loading and the run defaults it feeds."""
    print("\n🔍 Checking environment...")

    try:
        from config import DEFAULT_LOG_LEVEL, DEFAULT_OUT_DIR, DEFAULT_SEED
        print(f"✅ .env defaults loaded (log level {DEFAULT_LOG_LEVEL}, out dir '{DEFAULT_OUT_DIR}', seed {DEFAULT_SEED})")
    except Exception as e:
        print(f"⚠️  .env loading issue: {e}")
        return False

    return True


def check_synthetic_data():
    """Generate a tiny long-tailed log and profile it."""
    print("\n🔍 Checking synthetic data...")

    try:
        from behavior_data import SyntheticSpec, build_samples, compute_frequency_profile, generate_synthetic_dataset

        log, _ = generate_synthetic_dataset(SyntheticSpec(num_behaviors=6, num_users=5, num_samples=200,
                                                          history_length=3))
        samples = build_samples(log, 3)
        profile = compute_frequency_profile(samples, log.vocabulary)
        print(f"✅ Generated {log.num_events} events; {len(profile.anchor_set)} anchor / "
              f"{len(profile.tail_set)} tail behaviors")
        return True
    except Exception as e:
        print(f"❌ Synthetic data check failed: {e}")
        return False


def check_model():
    """Run one forward pass of the reference predictor."""
    print("\n🔍 Checking reference model...")

    try:
        import numpy as np

        from behavior_data import BehaviorEvent, Sample, TargetContext, Vocabulary
        from config import ModelConfig
        from reference_model import forward, init_model

        vocab = Vocabulary(("Exercise", "Gaming", "Video"))
        params = init_model(vocab, ModelConfig(embedding_dim=4, hidden_dim=4, location_buckets=2, history_length=1),
                            np.random.default_rng(0))
        sample = Sample((BehaviorEvent("home", 1, 16, 0),), 1, TargetContext(1, 20, "home"))
        output = forward(params, sample)
        print(f"✅ Forward pass works; predicts '{vocab.name_of(output.predicted)}'")
        return True
    except Exception as e:
        print(f"❌ Reference model check failed: {e}")
        return False


def main():
    """Run all checks."""
    print("🚀 Behavior Tuning Pipeline Setup Check")
    print("=" * 50)

    all_passed = True

    if not check_imports():
        all_passed = False

    if not check_environment():
        all_passed = False

    if not check_synthetic_data():
        all_passed = False

    if not check_model():
        all_passed = False

    print("\n" + "=" * 50)
    if all_passed:
        print("🎉 All checks passed! Your setup is ready.")
        print("\nNext steps:")
        print("1. Activate your virtual environment: source .venv/bin/activate")
        print("2. Run: python cli.py run")
        print("3. Run the tests: pytest")
    else:
        print("❌ Some checks failed. Please look at the errors above.")
        print("\nCommon solutions:")
        print("1. Install missing dependencies: pip install -r requirements.txt")
        print("2. Check your Python version (3.10+ required)")
        print("3. Run from the repository root so local modules resolve")

    return all_passed


if __name__ == "__main__":
    success = main()
    sys.exit(0 if success else 1)
