"""
Report UI Components
Trajectory overlays (SVG and altair) and console formatting of metrics.
"""
import math

import altair as alt
import pandas as pd

# altair refuses to embed more rows than this by default
MAX_CHART_ROWS = 5000


def _thin(df):
    if len(df) <= MAX_CHART_ROWS:
        return df
    return df.iloc[::math.ceil(len(df) / MAX_CHART_ROWS)]


class ReportUI:
    def __init__(self, canvas_size=600, margin=20):
        """Initialize report components."""
        self.canvas_size = canvas_size
        self.margin = margin

    def _projection(self, xs, ys):
        x0, x1 = min(xs), max(xs)
        y0, y1 = min(ys), max(ys)
        span = max(x1 - x0, y1 - y0, 1e-6)
        scale = (self.canvas_size - 2 * self.margin) / span

        def project(x, y):
            # SVG rows grow downwards
            return (self.margin + (x - x0) * scale,
                    self.canvas_size - self.margin - (y - y0) * scale)

        return project

    def trajectory_svg(self, truth, predictions):
        """
        Render ground truth (red polyline) and predicted positions (blue
        circles, one per prediction); failed frames are marked with a grey
        cross at the ground-truth position.

        Args:
            truth (PoseLog): Ground-truth log
            predictions (list): LocalizationResults

        Returns:
            str: SVG document
        """
        size = self.canvas_size
        header = (f'<svg xmlns="http://www.w3.org/2000/svg" width="{size}" height="{size}" '
                  f'viewBox="0 0 {size} {size}">')
        xs = list(truth.x) + [r.pose.x for r in predictions if r.success]
        ys = list(truth.y) + [r.pose.y for r in predictions if r.success]
        if not xs:
            return header + '\n</svg>\n'
        project = self._projection(xs, ys)

        lines = [header, '<rect width="100%" height="100%" fill="white"/>']
        if len(truth):
            points = ' '.join('%.2f,%.2f' % project(x, y) for x, y in zip(truth.x, truth.y))
            lines.append(f'<polyline class="truth" fill="none" stroke="red" stroke-width="1" '
                         f'points="{points}"/>')

        for r in predictions:
            if r.success:
                cx, cy = project(r.pose.x, r.pose.y)
                lines.append(f'<circle class="prediction" cx="{cx:.2f}" cy="{cy:.2f}" r="2" '
                             f'fill="blue"><title>frame {r.frame_id}</title></circle>')
            elif r.frame_id in truth.index_of:
                pose = truth.pose_of(r.frame_id)
                cx, cy = project(pose.x, pose.y)
                lines.append(f'<path class="failure" d="M{cx - 3:.2f},{cy - 3:.2f} l6,6 '
                             f'M{cx - 3:.2f},{cy + 3:.2f} l6,-6" stroke="grey" stroke-width="1">'
                             f'<title>frame {r.frame_id}: {r.status}</title></path>')
        lines.append('</svg>')
        return '\n'.join(lines) + '\n'

    def trajectory_chart(self, truth, predictions):
        """
        Interactive altair chart of the same overlay.

        Args:
            truth (PoseLog): Ground-truth log
            predictions (list): LocalizationResults

        Returns:
            alt.LayerChart: Chart
        """
        truth_df = truth.to_dataframe()[['frame_id', 'x', 'y']]
        pred_df = pd.DataFrame(
            [(r.frame_id, r.pose.x, r.pose.y) for r in predictions if r.success],
            columns=['frame_id', 'x', 'y'],
        )
        truth_df, pred_df = _thin(truth_df), _thin(pred_df)

        line = alt.Chart(truth_df).mark_line(color='red').encode(
            x=alt.X('x:Q', title='x [m]', scale=alt.Scale(zero=False)),
            y=alt.Y('y:Q', title='y [m]', scale=alt.Scale(zero=False)),
            order='frame_id:Q',
        )
        points = alt.Chart(pred_df).mark_circle(color='blue', size=12).encode(
            x='x:Q', y='y:Q', tooltip=['frame_id:Q', 'x:Q', 'y:Q'],
        )
        return (line + points).properties(title='Ground truth and predictions')

    def format_summary(self, summary):
        """
        Format the summary table for the console.

        Args:
            summary (pd.DataFrame): Summary rows

        Returns:
            str: Formatted text
        """
        if summary.empty:
            return "No evaluation areas."

        lines = ["Area [m²]  Frames   PSR     TSR     Pos err [m]  Angle err [°]"]
        for row in summary.itertuples(index=False):
            lines.append(
                f"{row.area_m2:>9g}  {row.n_frames:>6d}  {row.psr:6.3f}  {row.tsr:6.3f}  "
                f"{self._fmt(row.mean_pos_err_true_m, '11.4f')}  {self._fmt(row.mean_angle_err_deg, '13.2f')}"
            )
        return "\n".join(lines)

    @staticmethod
    def _fmt(value, spec):
        if value is None or (isinstance(value, float) and math.isnan(value)):
            return '-'.rjust(int(spec.split('.')[0]))
        return format(value, spec)
