from pathlib import Path

from django.core.management.base import BaseCommand

from ...data import load_dataset, write_pgm
from ...metrics import mask_from_prob, write_metrics_csv
from ...model import load_weights
from ...report_formatter import format_eval
from ...state import MetricRow
from ...trainer import evaluate
from ._common import dataset_root, exit_codes, read_config


class Command(BaseCommand):
    help = "Evaluate weights on a dataset; writes metrics.csv and predicted masks."

    def add_arguments(self, parser):
        parser.add_argument("--config", required=True)
        parser.add_argument("--weights", required=True)
        parser.add_argument("--tta", action="store_true", help="average over the 8 dihedral flips")
        parser.add_argument("--out", default=None, help="output directory (default: the config's output dir)")

    def handle(self, *args, **options):
        with exit_codes():
            cfg = read_config(options["config"])
            store = load_weights(options["weights"], cfg.model)
            samples = load_dataset(dataset_root(cfg, evaluation=True))
            out_dir = Path(options["out"]) if options["out"] else cfg.output.resolved()

            def save_mask(image_id, prob):
                write_pgm(out_dir / "predictions" / f"{image_id}.pgm", mask_from_prob(prob))

            table = evaluate(cfg.model, store, samples, tta=options["tta"],
                             ignore_label=cfg.data.ignore_label, on_prediction=save_mask)

            rows = list(table["rows"])
            for name, agg in table["aggregate"].items():
                rows.append(MetricRow(image_id="mean", metric_name=name, value=agg["mean"]))
                rows.append(MetricRow(image_id="std", metric_name=name, value=agg["std"]))
            if table["pooled_auc"] is not None:
                rows.append(MetricRow(image_id="pooled", metric_name="auc", value=table["pooled_auc"]))
            path = write_metrics_csv(out_dir / "metrics.csv", rows)

        self.stdout.write(format_eval(table))
        self.stdout.write(f"✅ metrics written to {path}")
