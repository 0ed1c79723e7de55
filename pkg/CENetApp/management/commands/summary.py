from django.core.management.base import BaseCommand

from ...config import NAMED_CONFIGURATIONS, named_model_config
from ...model import model_summary
from ...report_formatter import format_summary
from ._common import exit_codes, read_config


class Command(BaseCommand):
    help = "Per-layer output shapes and parameter counts of the configured model."

    def add_arguments(self, parser):
        parser.add_argument("--config", default=None, help="run config JSON (its model section is used)")
        parser.add_argument("--variant", choices=sorted(NAMED_CONFIGURATIONS), default=None,
                            help="named configuration instead of a config file")
        parser.add_argument("--width", type=float, default=None, help="width multiplier override")
        parser.add_argument("--size", type=int, default=64, help="input height and width")

    def handle(self, *args, **options):
        with exit_codes():
            if options["variant"]:
                overrides = {} if options["width"] is None else {"width_multiplier": options["width"]}
                model_cfg = named_model_config(options["variant"], **overrides)
            else:
                model_cfg = read_config(options["config"]).model
                if options["width"] is not None:
                    model_cfg = model_cfg.model_validate({**model_cfg.model_dump(), "width_multiplier": options["width"]})
            rows = model_summary(model_cfg, (options["size"], options["size"]))
        self.stdout.write(format_summary(model_cfg.label, rows))
