from pathlib import Path

from django.core.management.base import BaseCommand

from ...data import IMAGE_SUFFIXES, read_image, write_pgm
from ...exceptions import DataError
from ...metrics import mask_from_prob
from ...model import load_weights, predict
from ...tta import tta_predict
from ._common import exit_codes, read_config


class Command(BaseCommand):
    help = "Segment every image in a directory; writes one PGM mask per image."

    def add_arguments(self, parser):
        parser.add_argument("--config", required=True)
        parser.add_argument("--weights", required=True)
        parser.add_argument("--input", required=True, help="directory of .ppm/.pgm/.png images")
        parser.add_argument("--out", required=True)
        parser.add_argument("--tta", action="store_true")

    def handle(self, *args, **options):
        with exit_codes():
            cfg = read_config(options["config"])
            store = load_weights(options["weights"], cfg.model)
            src, out = Path(options["input"]), Path(options["out"])
            if not src.is_dir():
                raise DataError(f"input directory not found: {src}")
            images = sorted(p for p in src.iterdir() if p.is_file() and p.suffix.lower() in IMAGE_SUFFIXES)

            def run(image):
                return predict(cfg.model, store, image)

            for path in images:
                image = read_image(path)
                prob = tta_predict(run, image) if options["tta"] else run(image)
                write_pgm(out / f"{path.stem}.pgm", mask_from_prob(prob))

        self.stdout.write(f"✅ {len(images)} masks written to {out}")
