#!/usr/bin/env python3
"""
Help and examples for forenvit
"""

EPILOG = """
Examples:
  # Render the default synthetic corpus (seen + unseen splits)
  python forenvit.py generate --out corpus --seed 7

  # Fine-tune the last two blocks, CLS and register tokens (approach 2)
  python forenvit.py train --manifest corpus/manifest.tsv --approach 2 --k 2

  # Frozen backbone, linear adaptors with dropout, concatenated features (approach 1)
  python forenvit.py train --manifest corpus/manifest.tsv --approach 1 --k 4 --fusion concat --adaptor linear --dropout 0.1

  # Cross-dataset protocol: recalibrate on val_unseen, test on test_unseen
  python forenvit.py eval --checkpoint runs/detector.fvt --calibrate-on val_unseen --split test_unseen

Exit codes: 0 ok, 2 configuration, 3 data/manifest/checkpoint, 4 io, 5 numeric
"""


def show_help():
    """Display comprehensive help information."""

    help_text = """
🕵️ forenvit - Help & Examples
==============================

DESCRIPTION:
    Detects manipulated face images with a compact vision transformer. Two
    approaches are supported: a frozen backbone whose final blocks feed small
    adaptors and a classifier (approach 1), and partial fine-tuning of the
    final blocks with a new classifier (approach 2).

BASIC USAGE:
    python forenvit.py <command> [OPTIONS]

COMMANDS:
    generate    Render the synthetic corpus and its manifest
    pretrain    Pretrain a backbone (--recipe masked | supervised)
    train       Train a detector (--approach 1 | 2, --k N)
    probe       PCA + k-means, k-NN, linear and MLP probes on frozen CLS features
    eval        Accuracy, TPR, TNR, EER and HTER for one split
    calibrate   Store the EER threshold of a validation split in the checkpoint
    ablate      One train + test run per k (--k-list 1,2,4,8)
    visualize   CLS attention overlays (--compare for a second checkpoint)

WORKFLOW:
    # 1. Data
    python forenvit.py generate --out corpus --seed 7

    # 2. Optional self-supervised pretraining
    python forenvit.py pretrain --manifest corpus/manifest.tsv --recipe masked --mask-ratio 0.75 --out runs/mae

    # 3. Detector
    python forenvit.py train --manifest corpus/manifest.tsv --backbone runs/mae/backbone.fvt --approach 2 --k 2 --out runs/ft

    # 4. Evaluation at tau = 0.5, then with the validation EER threshold
    python forenvit.py eval --manifest corpus/manifest.tsv --checkpoint runs/ft/detector.fvt --threshold 0.5
    python forenvit.py calibrate --manifest corpus/manifest.tsv --checkpoint runs/ft/detector.fvt --split val --out runs/ft
    python forenvit.py eval --manifest corpus/manifest.tsv --checkpoint runs/ft/calibrated.fvt

    # 5. Where does the model look?
    python forenvit.py visualize --checkpoint runs/ft/detector.fvt --compare runs/mae/backbone.fvt corpus/test/*_eye_swap.pgm

SPLITS:
    • train, val, test          - real faces and the seen manipulations (eye_swap, mouth_grid)
    • val_unseen, test_unseen   - real faces and unseen manipulations (landmark_blur, noise_fill)

GLOBAL OPTIONS (every command):
    --config FILE       INI file, [section] key = value (see resolved_config.ini of any run)
    --seed N            Seed every random stream derives from
    --out DIR           Output directory
    --manifest FILE     Corpus manifest
    -v, --verbose       Debug logging

OUTPUT:
    Every command writes resolved_config.ini next to its outputs; rerunning
    with that file and the same seed reproduces the outputs exactly.
    • *.fvt             checkpoints (backbone, detector, probe)
    • train_log.txt     step, loss, validation EER, validation accuracy
    • report_*.txt      metric report with per-method and per-source tables
    • ablation.tsv/png  test EER per k
    • *_overlay.ppm     attention overlays, *_montage.ppm side by side

EXIT CODES:
    0 ok, 2 configuration, 3 data/manifest/checkpoint, 4 io, 5 numeric divergence
    Errors print one line on stderr: <ErrorClass>: <message>

TROUBLESHOOTING:
    • Verify all dependencies are installed: pip install -r requirements.txt
    • A checkpoint trained with other model settings fails to load with the
      offending parameter named; pass the matching --config
    • Run the test suite with pytest; add --runslow for the desk-scale training checks
"""

    print(help_text)


if __name__ == "__main__":
    show_help()
