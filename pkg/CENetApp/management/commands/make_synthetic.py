from django.core.management.base import BaseCommand

from ...synthetic import make_synthetic
from ._common import exit_codes


class Command(BaseCommand):
    help = "Write a seeded synthetic disc/ellipse dataset (images/*.ppm, masks/*.pgm)."

    def add_arguments(self, parser):
        parser.add_argument("--out", required=True)
        parser.add_argument("--count", type=int, default=8)
        parser.add_argument("--size", type=int, default=64)
        parser.add_argument("--seed", type=int, default=0)
        parser.add_argument("--multiscale", action="store_true", help="1-3 discs with radii 2-20 px")

    def handle(self, *args, **options):
        with exit_codes():
            samples = make_synthetic(options["out"], options["count"], options["size"], options["seed"],
                                     options["multiscale"])
        self.stdout.write(f"✅ {len(samples)} samples written to {options['out']}")
