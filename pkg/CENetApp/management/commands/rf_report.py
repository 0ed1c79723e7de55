from django.core.management.base import BaseCommand, CommandError

from ...model import dac_branch_specs, encoder_rf_stages
from ...report_formatter import dac_rf_rows, encoder_rf_rows, format_rf_report
from ._common import EXIT_VERIFY


class Command(BaseCommand):
    help = "Receptive fields of the DAC branches (checked against gradient support) and encoder stages."

    def add_arguments(self, parser):
        parser.add_argument("--no-atrous", action="store_true", help="report the rate-1 DAC variant")

    def handle(self, *args, **options):
        dac = dac_rf_rows(dac_branch_specs(1, atrous=not options["no_atrous"]))
        self.stdout.write(format_rf_report(dac, encoder_rf_rows(encoder_rf_stages())))
        bad = [r["branch"] for r in dac if r["rf"] != r["influence"]]
        if bad:
            raise CommandError(f"analytic and brute-force receptive fields differ for branches {bad}",
                               returncode=EXIT_VERIFY)
