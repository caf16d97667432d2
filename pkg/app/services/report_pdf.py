from __future__ import annotations

"""Rendu PDF du tableau comparatif via PyMuPDF."""

from pathlib import Path
from typing import List, Optional, Sequence, Tuple

import fitz  # PyMuPDF

from app.core.experiment import atomic_write_bytes
from app.services.report import ReportRow

PAGE_W, PAGE_H = fitz.paper_size("a4-l")
MARGIN_CM = 1.5
ROW_H = 18.0
FONT_SIZE = 9.0
HEADER_FILL = "#E5E7EB"
TEXT_COLOR = "#111827"
BORDER_COLOR = "#9CA3AF"

HEADERS = ("Modèle", "Schéma", "Bits", "Params (M)", "Taille (Mo)", "Compression", "EER (%)", "EER AS-norm (%)")
WIDTHS = (0.20, 0.10, 0.07, 0.12, 0.12, 0.12, 0.12, 0.15)


def cm_to_pt(cm: float) -> float:
    return (cm / 2.54) * 72.0


def _hex_to_rgb01(hex_color: str) -> Tuple[float, float, float]:
    s = (hex_color or "").strip().lstrip("#")
    if len(s) != 6:
        return (0.0, 0.0, 0.0)
    return (int(s[0:2], 16) / 255.0, int(s[2:4], 16) / 255.0, int(s[4:6], 16) / 255.0)


def _insert_text_safe(page: "fitz.Page", point: Tuple[float, float], text: str, fontname: str = "helv") -> None:
    """Insère du texte ; repli sur la police par défaut si ``fontname`` échoue."""
    kwargs = {"fontsize": FONT_SIZE, "color": _hex_to_rgb01(TEXT_COLOR)}
    try:
        page.insert_text(point, text, fontname=fontname, **kwargs)
    except (RuntimeError, ValueError):
        page.insert_text(point, text, **kwargs)


def _pct(v: Optional[float]) -> str:
    return "-" if v is None else f"{100.0 * v:.2f}"


def _cells(row: ReportRow) -> List[str]:
    return [
        row.model_id,
        row.scheme,
        str(row.bits),
        f"{row.params_m:.4f}",
        f"{row.size_mb:.4f}",
        f"{row.compression:.2f}x",
        _pct(row.eer),
        _pct(row.eer_norm),
    ]


def render_report_pdf(rows: Sequence[ReportRow], title: str = "Comparatif des modèles") -> bytes:
    left = cm_to_pt(MARGIN_CM)
    top = cm_to_pt(MARGIN_CM)
    table_w = PAGE_W - 2 * left
    xs = [left]
    for w in WIDTHS:
        xs.append(xs[-1] + w * table_w)
    border = _hex_to_rgb01(BORDER_COLOR)

    doc = fitz.open()
    try:
        page = None
        y = 0.0

        def new_page() -> float:
            nonlocal page
            page = doc.new_page(width=PAGE_W, height=PAGE_H)
            _insert_text_safe(page, (left, top), title, fontname="hebo")
            y0 = top + ROW_H
            page.draw_rect(fitz.Rect(left, y0, left + table_w, y0 + ROW_H), color=border, fill=_hex_to_rgb01(HEADER_FILL))
            for x, h in zip(xs, HEADERS):
                _insert_text_safe(page, (x + 4, y0 + ROW_H - 5), h, fontname="hebo")
            return y0 + ROW_H

        y = new_page()
        for row in rows:
            if y + ROW_H > PAGE_H - top:
                y = new_page()
            page.draw_rect(fitz.Rect(left, y, left + table_w, y + ROW_H), color=border)
            for x, text in zip(xs, _cells(row)):
                _insert_text_safe(page, (x + 4, y + ROW_H - 5), text)
            y += ROW_H
        return doc.tobytes(garbage=1, deflate=True)
    finally:
        doc.close()


def write_report_pdf(path: Path, rows: Sequence[ReportRow], title: str = "Comparatif des modèles") -> None:
    atomic_write_bytes(Path(path), render_report_pdf(rows, title))
