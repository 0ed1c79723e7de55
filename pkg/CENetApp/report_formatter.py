from typing import Any, Dict, List, Sequence, Tuple

from .nn_ops import influence_extent, receptive_field, receptive_field_table
from .state import EvalTable, GradCheckReport, LayerSummary


def format_table(headers: Sequence[str], rows: Sequence[Sequence[Any]]) -> str:
    """
    Plain fixed-width table; columns are as wide as their widest cell.
    """
    cells = [[str(h) for h in headers]] + [[str(c) for c in row] for row in rows]
    widths = [max(len(r[i]) for r in cells) for i in range(len(headers))]
    lines = ["  ".join(c.ljust(w) for c, w in zip(r, widths)).rstrip() for r in cells]
    lines.insert(1, "  ".join("-" * w for w in widths))
    return "\n".join(lines)


def dac_rf_rows(chains: Sequence[Sequence[Any]], size: int = 64) -> List[Dict[str, int]]:
    """Analytic receptive field of each DAC branch next to the influence-mask extent."""
    rows = []
    for i, chain in enumerate(chains, start=1):
        rf = receptive_field(chain)
        rows.append({"branch": i, "rf": rf["rf"], "jump": rf["jump"], "influence": influence_extent(chain, size)})
    return rows


def encoder_rf_rows(stages: Sequence[Tuple[str, Sequence[Any]]]) -> List[Dict[str, Any]]:
    rows = []
    for name, chain in stages:
        rf = receptive_field_table(chain)[-1]
        rows.append({"stage": name, "rf": rf["rf"], "stride": rf["jump"]})
    return rows


def format_rf_report(dac_rows: Sequence[Dict[str, int]], encoder_rows: Sequence[Dict[str, Any]]) -> str:
    dac = format_table(
        ["branch", "receptive field", "jump", "influence extent"],
        [[r["branch"], r["rf"], r["jump"], r["influence"]] for r in dac_rows],
    )
    enc = format_table(
        ["stage", "receptive field", "stride"],
        [[r["stage"], r["rf"], r["stride"]] for r in encoder_rows],
    )
    return f"DAC branches\n{dac}\n\nEncoder stages\n{enc}"


def format_gradcheck(results: Sequence[Tuple[str, GradCheckReport]]) -> str:
    rows = []
    for name, report in results:
        status = "ok" if report["passed"] else "FAIL"
        where = "" if report["passed"] else str(report["worst_index"])
        rows.append([name, f"{report['max_rel_error']:.3e}", status, where])
    failed = sum(1 for _, r in results if not r["passed"])
    footer = f"{len(results) - failed}/{len(results)} ops passed"
    return format_table(["op", "max rel error", "status", "worst coordinate"], rows) + "\n" + footer


def format_summary(label: str, rows: Sequence[LayerSummary]) -> str:
    body = format_table(
        ["layer", "output shape", "params"],
        [[r["name"], "x".join(str(d) for d in r["output_shape"]) if r["output_shape"] else "", f"{r['params']:,}"]
         for r in rows],
    )
    return f"{label}\n{body}"


def format_eval(table: EvalTable) -> str:
    rows = [[name, f"{agg['mean']:.4f}", f"{agg['std']:.4f}", agg["count"]] for name, agg in table["aggregate"].items()]
    text = format_table(["metric", "mean", "std", "images"], rows)
    if table["pooled_auc"] is not None:
        text += f"\npooled auc: {table['pooled_auc']:.4f}"
    return text
