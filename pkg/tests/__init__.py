"""
hpl Test Suite

This package contains unit and integration tests for the hpl CLI and library.

Test modules:
- test_tensor_core.py: affine/tanh kernel, taped backward, SGD, gradient oracle
- test_hash_model.py: hash model, pairwise loss, training, checkpoints
- test_hamming_space.py: codes, distances, anchor voting, database ranking
- test_attack_kit.py: trigger injection/generation, PGD, confusing perturbations
- test_poison_pipeline.py: synthetic data, poisoning, stages, run_pipeline
- test_eval_metrics.py: AP/MAP/t-MAP, PR curves, histograms
- test_defenses.py: spectral filter, pruning, DP training
- test_run_config.py: RunConfig parsing, overrides
- test_cli.py: hpl.py argument parsing, routing and exit codes
- test_acceptance.py: reference-config checks (marked slow)
"""
