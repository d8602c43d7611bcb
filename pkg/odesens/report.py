"""Static HTML summary page written next to the CSV tables."""

from pathlib import Path
from typing import Any

from jinja2 import Environment, FileSystemLoader

# Templates live at the repository root, outside the package.
TEMPLATES_DIR = Path(__file__).resolve().parent.parent / "templates"
REPORT_TEMPLATE = "report.html.j2"


def _fmt(value: Any) -> str:
    """Numbers in 6 significant digits; everything else as text."""
    if isinstance(value, bool) or value is None:
        return "" if value is None else str(value).lower()
    if isinstance(value, int | float):
        return f"{value:.6g}"
    return str(value)


def render_report(out_dir: Path, kind: str, manifest: dict[str, Any]) -> Path:
    """Render report.html for a "run" or "sweep" manifest.

    Args:
        out_dir: Output directory holding the tables
        kind: "run" or "sweep"
        manifest: The manifest dictionary about to be written

    Returns:
        Path of the written page
    """
    env = Environment(loader=FileSystemLoader(TEMPLATES_DIR))
    env.filters["fmt"] = _fmt
    template = env.get_template(REPORT_TEMPLATE)

    config = manifest.get("config", {})
    html = template.render(
        kind=kind,
        title=f"odesens {kind}: {config.get('problem', '')}",
        status=manifest.get("status", "ok"),
        config=config,
        scalars=manifest.get("scalars", {}),
        rows=manifest.get("rows", []),
        tables=manifest.get("tables", {}),
        timings=manifest.get("timings", {}),
        residuals=manifest.get("residuals", {}),
        diagnostics=manifest.get("diagnostics", {}),
        errors=manifest.get("errors", []),
    )
    path = out_dir / "report.html"
    path.write_text(html, encoding="utf-8")
    return path
