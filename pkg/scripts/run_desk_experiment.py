"""Run the scaled synthetic experiment and print the headline numbers.

    python scripts/run_desk_experiment.py --out runs/desk --width 16 --epochs 30
"""

import argparse
import json
import logging

from biastransfer.experiment import DeskConfig, run_desk_experiment


def main():
    p = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    p.add_argument("--out", default="runs/desk")
    p.add_argument("--width", type=int, default=DeskConfig.base_width)
    p.add_argument("--epochs", type=int, default=DeskConfig.epochs)
    p.add_argument("--seeds", type=int, nargs="+", default=list(DeskConfig.seeds))
    p.add_argument("--architecture", default=DeskConfig.architecture,
                   choices=["cyclegan", "unet_cyclegan", "fpg"])
    p.add_argument("--extra", default=DeskConfig.extra_mode, choices=["none", "ms_ssim", "structure", "combined"])
    p.add_argument("--no-collapse-check", action="store_true")
    args = p.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")
    cfg = DeskConfig(base_width=args.width, epochs=args.epochs, seeds=tuple(args.seeds),
                     architecture=args.architecture, extra_mode=args.extra,
                     collapse_check=not args.no_collapse_check)
    result = run_desk_experiment(cfg, args.out)
    s = result.summary()
    print(json.dumps({k: s[k] for k in ("selected", "gan_accuracy_delta", "baseline_accuracy_delta", "collapse")},
                     indent=2))
    t = s["test"]
    print(f"test FID {t['fid']:.4f} (raw {t['fid_original']:.4f})  SSIM {t['ssim_mean']:.3f}  "
          f"acc {t['accuracy']:.3f} (raw {t['accuracy_original']:.3f})")


if __name__ == "__main__":
    main()
