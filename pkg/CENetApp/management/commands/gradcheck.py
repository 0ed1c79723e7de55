from django.conf import settings
from django.core.management.base import BaseCommand, CommandError

from ...gradient_suite import run_gradient_suite
from ...report_formatter import format_gradcheck
from ._common import EXIT_VERIFY


class Command(BaseCommand):
    help = "Check every differentiable op against central finite differences (64-bit)."

    def add_arguments(self, parser):
        parser.add_argument("--seed", type=int, default=None)
        parser.add_argument("--tolerance", type=float, default=1e-4)

    def handle(self, *args, **options):
        seed = settings.CENET_GRADCHECK_SEED if options["seed"] is None else options["seed"]
        results = run_gradient_suite(seed, options["tolerance"])
        self.stdout.write(format_gradcheck(results))
        failed = [(name, r["worst_index"]) for name, r in results if not r["passed"]]
        if failed:
            detail = "; ".join(f"{name} at {where}" for name, where in failed)
            raise CommandError(f"gradient check failed: {detail}", returncode=EXIT_VERIFY)
