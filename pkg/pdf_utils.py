from reportlab.lib.pagesizes import A4
from reportlab.lib import colors
from reportlab.platypus import SimpleDocTemplate, Paragraph, Spacer, Table, TableStyle
from reportlab.lib.styles import getSampleStyleSheet, ParagraphStyle
from reportlab.lib.enums import TA_CENTER
from xml.sax.saxutils import escape
import os
import logging
from datetime import datetime, timezone
from typing import Dict, List

# Configure logging
logging.basicConfig(level=logging.INFO, format='%(asctime)s - %(name)s - %(levelname)s - %(message)s')
logger = logging.getLogger(__name__)


class AcceptanceReportConfig:
    """Colors and table styling for the acceptance report."""

    VERDICT_COLORS = {
        'pass': colors.HexColor('#27ae60'),
        'fail': colors.HexColor('#c0392b'),
        'skipped': colors.HexColor('#7f8c8d'),
    }
    FALLBACK_COLOR = colors.HexColor('#808080')

    HEADER_BACKGROUND = colors.HexColor('#34495e')
    BODY_BACKGROUND = colors.HexColor('#ecf0f1')
    GRID_COLOR = colors.HexColor('#bdc3c7')
    TEXT_COLOR = colors.HexColor('#2c3e50')


class AcceptanceReportGenerator:
    """Renders a consolidated acceptance report as a PDF."""

    def __init__(self, config: AcceptanceReportConfig = None):
        self.config = config or AcceptanceReportConfig()

    def generate(self, report, pdf_path: str = "report.pdf") -> str:
        """Build the PDF; returns the path, or "" when rendering failed."""
        try:
            doc = SimpleDocTemplate(pdf_path, pagesize=A4, topMargin=50, bottomMargin=50,
                                    leftMargin=40, rightMargin=40)
            styles = self._create_styles()
            elements = []
            elements.extend(self._create_title_section(report, styles))
            elements.extend(self._create_acceptance_table(report, styles))
            elements.extend(self._create_runs_table(report, styles))
            elements.extend(self._create_missing_section(report, styles))
            elements.extend(self._create_footer_section(styles))
            doc.build(elements)
            logger.info(f"Acceptance report PDF generated: {pdf_path}")
            return pdf_path
        except Exception as e:
            logger.error(f"Error generating acceptance report PDF: {e}", exc_info=True)
            if os.path.exists(pdf_path):
                os.remove(pdf_path)
            return ""

    def _create_styles(self) -> Dict:
        styles = getSampleStyleSheet()
        styles.add(ParagraphStyle(
            name='ReportTitle',
            parent=styles['Title'],
            fontSize=22,
            spaceAfter=20,
            alignment=TA_CENTER,
            textColor=self.config.TEXT_COLOR,
            fontName='Helvetica-Bold'
        ))
        styles.add(ParagraphStyle(
            name='SectionHeader',
            parent=styles['Heading1'],
            fontSize=15,
            spaceBefore=16,
            spaceAfter=10,
            textColor=self.config.HEADER_BACKGROUND,
            fontName='Helvetica-Bold'
        ))
        styles.add(ParagraphStyle(
            name='Cell',
            parent=styles['Normal'],
            fontSize=8,
            leading=10,
            textColor=self.config.TEXT_COLOR,
        ))
        styles.add(ParagraphStyle(
            name='ReportBody',
            parent=styles['Normal'],
            fontSize=10,
            leading=14,
            textColor=self.config.TEXT_COLOR,
        ))
        return styles

    def _table_style(self, extra: List = ()) -> TableStyle:
        return TableStyle([
            ('BACKGROUND', (0, 0), (-1, 0), self.config.HEADER_BACKGROUND),
            ('TEXTCOLOR', (0, 0), (-1, 0), colors.whitesmoke),
            ('FONTNAME', (0, 0), (-1, 0), 'Helvetica-Bold'),
            ('FONTSIZE', (0, 0), (-1, 0), 9),
            ('BOTTOMPADDING', (0, 0), (-1, 0), 8),
            ('BACKGROUND', (0, 1), (-1, -1), self.config.BODY_BACKGROUND),
            ('GRID', (0, 0), (-1, -1), 0.5, self.config.GRID_COLOR),
            ('VALIGN', (0, 0), (-1, -1), 'TOP'),
            *extra,
        ])

    def _create_title_section(self, report, styles) -> List:
        generated_at = datetime.now(timezone.utc).strftime("%Y-%m-%d %H:%M UTC")
        overall = "PASS" if report.passed else "FAIL"
        return [
            Paragraph("Conformal decay laboratory: acceptance report", styles['ReportTitle']),
            Paragraph(f"<b>Generated:</b> {generated_at}", styles['ReportBody']),
            Paragraph(f"<b>Runs:</b> {len(report.runs)} &nbsp; <b>Overall:</b> {overall}", styles['ReportBody']),
            Spacer(1, 12),
        ]

    def _create_acceptance_table(self, report, styles) -> List:
        cell = styles['Cell']
        data = [['#', 'Check', 'Verdict', 'Value', 'Threshold']]
        extra = []
        for i, row in enumerate(report.rows, start=1):
            data.append([
                str(row.number),
                Paragraph(escape(row.name), cell),
                row.verdict,
                Paragraph(escape(row.value), cell),
                Paragraph(escape(row.threshold), cell),
            ])
            color = self.config.VERDICT_COLORS.get(row.verdict, self.config.FALLBACK_COLOR)
            extra.append(('TEXTCOLOR', (2, i), (2, i), color))
            extra.append(('FONTNAME', (2, i), (2, i), 'Helvetica-Bold'))
        table = Table(data, colWidths=[22, 110, 50, 200, 130], repeatRows=1)
        table.setStyle(self._table_style(extra))
        return [Paragraph("Acceptance", styles['SectionHeader']), table, Spacer(1, 12)]

    def _create_runs_table(self, report, styles) -> List:
        if not report.runs:
            return []
        data = [['Run', 'Geometry', 'p', 'h', 'Energy drift', 'Strong C', 'Weak C']]
        for s in report.runs:
            data.append([
                Paragraph(escape(s.name), styles['Cell']),
                s.geometry,
                f"{s.power:g}",
                f"{s.resolution:.4g}",
                self._number(s.energy_drift),
                self._number(s.strong_constant),
                self._number(s.weak_constant),
            ])
        table = Table(data, colWidths=[120, 55, 30, 55, 70, 90, 90], repeatRows=1)
        table.setStyle(self._table_style())
        return [Paragraph("Runs", styles['SectionHeader']), table, Spacer(1, 12)]

    def _create_missing_section(self, report, styles) -> List:
        if not report.missing:
            return []
        elements = [Paragraph("Missing artifacts", styles['SectionHeader'])]
        for item in report.missing:
            elements.append(Paragraph(escape(item), styles['ReportBody']))
        return elements

    def _create_footer_section(self, styles) -> List:
        return [Spacer(1, 30), Paragraph("--- End of Report ---", styles['ReportBody'])]

    @staticmethod
    def _number(value) -> str:
        return "n/a" if value is None else f"{value:.4g}"


def generate_acceptance_report_pdf(report, pdf_path: str = "report.pdf") -> str:
    generator = AcceptanceReportGenerator()
    return generator.generate(report, pdf_path)
