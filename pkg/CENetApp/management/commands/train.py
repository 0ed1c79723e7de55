from pathlib import Path

from django.core.management.base import BaseCommand

from ...config import write_effective_config
from ...data import load_dataset
from ...exceptions import DataError
from ...model import save_weights
from ...trainer import train
from ._common import dataset_root, exit_codes, read_config


class Command(BaseCommand):
    help = "Train a segmentation model from a run config; writes checkpoints, history.csv and weights."

    def add_arguments(self, parser):
        parser.add_argument("--config", required=True, help="run config JSON")
        parser.add_argument("--resume", nargs="?", const="", default=None,
                            help="checkpoint directory to resume from (default: the output dir)")
        parser.add_argument("--max-iters", type=int, default=None, help="override train.max_iters")
        parser.add_argument("--no-progress", action="store_true", help="hide the progress bar")

    def handle(self, *args, **options):
        with exit_codes():
            cfg = read_config(options["config"])
            if options["max_iters"] is not None:
                cfg = cfg.model_copy(update={"train": cfg.train.model_copy(update={"max_iters": options["max_iters"]})})
            out_dir = cfg.output.resolved()
            write_effective_config(cfg, out_dir)

            samples = load_dataset(dataset_root(cfg))
            if not samples:
                raise DataError(f"no training samples in {dataset_root(cfg)}")

            resume = options["resume"]
            if resume is not None:
                resume = Path(resume) if resume else out_dir

            result = train(
                cfg.model,
                samples,
                cfg.train,
                cfg.data.augment,
                resume=resume,
                out_dir=out_dir,
                ignore_label=cfg.data.ignore_label,
                config_hash=cfg.config_hash(),
                progress=not options["no_progress"],
            )
            save_weights(result["store"], out_dir / "weights.cetnsr")

        ran = len(result["history"])
        last = f", final loss {result['history'][-1]['loss']:.4f}" if ran else ""
        self.stdout.write(f"✅ {ran} iterations run, now at {result['iteration']}{last}; outputs in {out_dir}")
