"""Human-readable report rendering."""

import logging
import typing as t

from jinja2 import Environment, FileSystemLoader, select_autoescape
from pydantic import BaseModel

from sdtp.core.globals import TEMPLATES_DIR

LOGGER: logging.Logger = logging.getLogger(__name__)

REPORT_ENV = Environment(
    loader=FileSystemLoader(TEMPLATES_DIR),
    autoescape=select_autoescape(["html", "xml"]),
    trim_blocks=True,
    lstrip_blocks=True,
    keep_trailing_newline=True,
)


def tflops(value: float) -> str:
    """FLOPs as TFLOPs with two decimals."""
    return f"{value / 1e12:.2f}"


def gigabytes(value: float) -> str:
    """Bytes as GB (1e9) with two decimals."""
    return f"{value / 1e9:.2f}"


def percent(value: float) -> str:
    """Fraction as a percentage with two decimals."""
    return f"{value * 100:.2f}%"


REPORT_ENV.filters["tflops"] = tflops
REPORT_ENV.filters["gigabytes"] = gigabytes
REPORT_ENV.filters["percent"] = percent


def render_template(template_name: str, **context: t.Any) -> str:
    """Render a template with the given context.

    Args:
        template_name (str): Name of the template file.
        **context: Context variables for rendering the template.

    Returns:
        str: The rendered template as a string.
    """
    return REPORT_ENV.get_template(template_name).render(**context)


def render_report(template_name: str, report: BaseModel) -> str:
    """Render a report model; its fields become template variables."""
    return render_template(
        f"reports/{template_name}", **report.model_dump(mode="json")
    )
