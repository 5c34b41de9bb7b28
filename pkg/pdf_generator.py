import io
import logging
import math
from reportlab.lib import colors
from reportlab.lib.pagesizes import A4, landscape
from reportlab.lib.styles import getSampleStyleSheet, ParagraphStyle
from reportlab.lib.units import inch
from reportlab.platypus import SimpleDocTemplate, Paragraph, Spacer, Table, TableStyle

logger = logging.getLogger(__name__)

LAYOUT_TITLES = {
    'architectures': 'Performance of all architectures per EMG channel',
    'architectures-mse': 'MSE of all architectures per EMG channel',
    'regimes': 'Performance per training regime',
    'input-variants': 'Performance per input variant and training regime',
}


def _format(value):
    if value is None or (isinstance(value, float) and math.isnan(value)):
        return '-'
    if abs(value) < 1:
        return f"{value:.4f}"
    return f"{value:.2f}"


def table_rows(rendered):
    """Header row plus one row per (row label, metric) of a rendered table"""
    frame = rendered.frame
    header = list(frame.index.names) + [str(c) for c in frame.columns]
    rows = [header]
    for labels, values in frame.iterrows():
        labels = labels if isinstance(labels, tuple) else (labels,)
        rows.append([str(label) for label in labels] + [_format(v) for v in values])
    return rows


def create_report_pdf(rendered, title=None, notes=None):
    """
    Render a RenderedTable as a one-table PDF document, returned as bytes
    """
    pdf_buffer = io.BytesIO()
    doc = SimpleDocTemplate(pdf_buffer, pagesize=landscape(A4),
                            rightMargin=36, leftMargin=36,
                            topMargin=36, bottomMargin=36)

    styles = getSampleStyleSheet()
    title_style = ParagraphStyle(
        'ReportTitle',
        parent=styles['Heading1'],
        fontSize=16,
        spaceAfter=12,
        textColor=colors.HexColor('#2c3e50')
    )
    note_style = ParagraphStyle(
        'ReportNote',
        parent=styles['Normal'],
        fontSize=9,
        textColor=colors.HexColor('#34495e')
    )

    story = [Paragraph(title or LAYOUT_TITLES.get(rendered.layout, rendered.layout), title_style)]

    rows = table_rows(rendered)
    n_labels = len(rendered.frame.index.names)
    label_width = 1.0 * inch
    value_width = max(0.6 * inch, (doc.width - n_labels * label_width) / max(1, len(rows[0]) - n_labels))
    table = Table(rows, colWidths=[label_width] * n_labels + [value_width] * (len(rows[0]) - n_labels),
                  repeatRows=1)
    table.setStyle(TableStyle([
        ('BACKGROUND', (0, 0), (-1, 0), colors.HexColor('#ecf0f1')),
        ('TEXTCOLOR', (0, 0), (-1, -1), colors.HexColor('#2c3e50')),
        ('FONTNAME', (0, 0), (-1, 0), 'Helvetica-Bold'),
        ('FONTNAME', (0, 1), (n_labels - 1, -1), 'Helvetica-Bold'),
        ('FONTSIZE', (0, 0), (-1, -1), 8),
        ('ALIGN', (n_labels, 0), (-1, -1), 'RIGHT'),
        ('GRID', (0, 0), (-1, -1), 0.5, colors.HexColor('#bdc3c7')),
        ('VALIGN', (0, 0), (-1, -1), 'MIDDLE'),
    ]))
    story.append(table)

    if notes:
        story.append(Spacer(1, 12))
        for note in notes:
            story.append(Paragraph(note, note_style))

    doc.build(story)
    pdf_data = pdf_buffer.getvalue()
    pdf_buffer.close()
    return pdf_data


def write_report_pdf(path, rendered, title=None, notes=None):
    with open(path, 'wb') as f:
        f.write(create_report_pdf(rendered, title, notes))
    logger.info(f"Wrote {path}")
    return path
