//! Static SVG charts for evaluation artifacts: precision-recall curves and
//! AP-versus-horizon lines. The markup is emitted directly so reports stay
//! dependency-free and diffable.

const WIDTH: f64 = 640.0;
const HEIGHT: f64 = 480.0;
const MARGIN_LEFT: f64 = 62.0;
const MARGIN_RIGHT: f64 = 18.0;
const MARGIN_TOP: f64 = 42.0;
const MARGIN_BOTTOM: f64 = 52.0;

const PALETTE: [&str; 10] = [
    "#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f",
    "#bcbd22", "#17becf",
];

/// Maximum legend entries before the remainder collapses into a count.
const LEGEND_CAP: usize = 12;

fn map_x(v: f64, lo: f64, hi: f64) -> f64 {
    MARGIN_LEFT + (v - lo) / (hi - lo) * (WIDTH - MARGIN_LEFT - MARGIN_RIGHT)
}

fn map_y(v: f64, lo: f64, hi: f64) -> f64 {
    HEIGHT - MARGIN_BOTTOM - (v - lo) / (hi - lo) * (HEIGHT - MARGIN_TOP - MARGIN_BOTTOM)
}

fn escape(text: &str) -> String {
    text.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

struct Frame {
    x_lo: f64,
    x_hi: f64,
    y_lo: f64,
    y_hi: f64,
}

impl Frame {
    fn open(&self, title: &str, x_label: &str, y_label: &str, x_ticks: &[f64]) -> String {
        let mut s = String::new();
        s.push_str(&format!(
            "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{WIDTH}\" height=\"{HEIGHT}\" \
             viewBox=\"0 0 {WIDTH} {HEIGHT}\" font-family=\"sans-serif\">\n"
        ));
        s.push_str(&format!(
            "<rect width=\"{WIDTH}\" height=\"{HEIGHT}\" fill=\"white\"/>\n"
        ));
        s.push_str(&format!(
            "<text x=\"{:.1}\" y=\"24\" font-size=\"15\" text-anchor=\"middle\">{}</text>\n",
            WIDTH / 2.0,
            escape(title)
        ));
        // plot border
        s.push_str(&format!(
            "<rect x=\"{:.1}\" y=\"{:.1}\" width=\"{:.1}\" height=\"{:.1}\" fill=\"none\" stroke=\"#333\"/>\n",
            MARGIN_LEFT,
            MARGIN_TOP,
            WIDTH - MARGIN_LEFT - MARGIN_RIGHT,
            HEIGHT - MARGIN_TOP - MARGIN_BOTTOM
        ));
        for &t in x_ticks {
            let px = map_x(t, self.x_lo, self.x_hi);
            let py = HEIGHT - MARGIN_BOTTOM;
            s.push_str(&format!(
                "<line x1=\"{px:.1}\" y1=\"{py:.1}\" x2=\"{px:.1}\" y2=\"{:.1}\" stroke=\"#333\"/>\n",
                py + 5.0
            ));
            s.push_str(&format!(
                "<text x=\"{px:.1}\" y=\"{:.1}\" font-size=\"11\" text-anchor=\"middle\">{}</text>\n",
                py + 18.0,
                trim_tick(t)
            ));
        }
        for i in 0..=4 {
            let v = self.y_lo + (self.y_hi - self.y_lo) * i as f64 / 4.0;
            let py = map_y(v, self.y_lo, self.y_hi);
            s.push_str(&format!(
                "<line x1=\"{:.1}\" y1=\"{py:.1}\" x2=\"{:.1}\" y2=\"{py:.1}\" stroke=\"#333\"/>\n",
                MARGIN_LEFT - 5.0,
                MARGIN_LEFT
            ));
            s.push_str(&format!(
                "<line x1=\"{:.1}\" y1=\"{py:.1}\" x2=\"{:.1}\" y2=\"{py:.1}\" stroke=\"#ddd\"/>\n",
                MARGIN_LEFT,
                WIDTH - MARGIN_RIGHT
            ));
            s.push_str(&format!(
                "<text x=\"{:.1}\" y=\"{:.1}\" font-size=\"11\" text-anchor=\"end\">{}</text>\n",
                MARGIN_LEFT - 9.0,
                py + 4.0,
                trim_tick(v)
            ));
        }
        s.push_str(&format!(
            "<text x=\"{:.1}\" y=\"{:.1}\" font-size=\"13\" text-anchor=\"middle\">{}</text>\n",
            MARGIN_LEFT + (WIDTH - MARGIN_LEFT - MARGIN_RIGHT) / 2.0,
            HEIGHT - 14.0,
            escape(x_label)
        ));
        s.push_str(&format!(
            "<text x=\"18\" y=\"{:.1}\" font-size=\"13\" text-anchor=\"middle\" \
             transform=\"rotate(-90 18 {:.1})\">{}</text>\n",
            MARGIN_TOP + (HEIGHT - MARGIN_TOP - MARGIN_BOTTOM) / 2.0,
            MARGIN_TOP + (HEIGHT - MARGIN_TOP - MARGIN_BOTTOM) / 2.0,
            escape(y_label)
        ));
        s
    }

    fn polyline(&self, points: &[(f64, f64)], color: &str, with_markers: bool) -> String {
        let clean: Vec<(f64, f64)> = points
            .iter()
            .copied()
            .filter(|(x, y)| x.is_finite() && y.is_finite())
            .collect();
        if clean.is_empty() {
            return String::new();
        }
        let coords: Vec<String> = clean
            .iter()
            .map(|&(x, y)| {
                format!(
                    "{:.2},{:.2}",
                    map_x(x, self.x_lo, self.x_hi),
                    map_y(y, self.y_lo, self.y_hi)
                )
            })
            .collect();
        let mut s = format!(
            "<polyline points=\"{}\" fill=\"none\" stroke=\"{color}\" stroke-width=\"1.6\"/>\n",
            coords.join(" ")
        );
        if with_markers {
            for &(x, y) in &clean {
                s.push_str(&format!(
                    "<circle cx=\"{:.2}\" cy=\"{:.2}\" r=\"3\" fill=\"{color}\"/>\n",
                    map_x(x, self.x_lo, self.x_hi),
                    map_y(y, self.y_lo, self.y_hi)
                ));
            }
        }
        s
    }
}

fn trim_tick(v: f64) -> String {
    if (v - v.round()).abs() < 1e-9 {
        format!("{}", v.round() as i64)
    } else {
        format!("{v:.2}")
    }
}

fn legend(names: &[String]) -> String {
    let mut s = String::new();
    let shown = names.len().min(LEGEND_CAP);
    for (i, name) in names.iter().take(shown).enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        let y = MARGIN_TOP + 14.0 + 15.0 * i as f64;
        let x = WIDTH - MARGIN_RIGHT - 150.0;
        s.push_str(&format!(
            "<line x1=\"{x:.1}\" y1=\"{:.1}\" x2=\"{:.1}\" y2=\"{:.1}\" stroke=\"{color}\" stroke-width=\"2\"/>\n",
            y - 4.0,
            x + 16.0,
            y - 4.0
        ));
        s.push_str(&format!(
            "<text x=\"{:.1}\" y=\"{y:.1}\" font-size=\"11\">{}</text>\n",
            x + 21.0,
            escape(name)
        ));
    }
    if names.len() > shown {
        let y = MARGIN_TOP + 14.0 + 15.0 * shown as f64;
        s.push_str(&format!(
            "<text x=\"{:.1}\" y=\"{y:.1}\" font-size=\"11\">+ {} more</text>\n",
            WIDTH - MARGIN_RIGHT - 150.0 + 21.0,
            names.len() - shown
        ));
    }
    s
}

/// Precision-recall chart: one curve per named class, both axes on [0, 1].
/// Non-finite points are dropped; classes with empty curves are skipped but
/// still listed in the legend so their absence is visible.
pub fn pr_curve_svg(curves: &[(String, Vec<(f64, f64)>)], title: &str) -> String {
    let frame = Frame {
        x_lo: 0.0,
        x_hi: 1.0,
        y_lo: 0.0,
        y_hi: 1.0,
    };
    let mut s = frame.open(title, "recall", "precision", &[0.0, 0.25, 0.5, 0.75, 1.0]);
    for (i, (_, points)) in curves.iter().enumerate() {
        s.push_str(&frame.polyline(points, PALETTE[i % PALETTE.len()], false));
    }
    let names: Vec<String> = curves.iter().map(|(n, _)| n.clone()).collect();
    s.push_str(&legend(&names));
    s.push_str("</svg>\n");
    s
}

/// AP (or any score in [0, 1]) against the prediction horizon; one marked
/// line per series. Horizons need not be contiguous.
pub fn ap_vs_horizon_svg(series: &[(String, Vec<(usize, f64)>)], title: &str) -> String {
    let max_h = series
        .iter()
        .flat_map(|(_, pts)| pts.iter().map(|&(h, _)| h))
        .max()
        .unwrap_or(0);
    let frame = Frame {
        x_lo: 0.0,
        x_hi: (max_h.max(1)) as f64,
        y_lo: 0.0,
        y_hi: 1.0,
    };
    let ticks: Vec<f64> = (0..=max_h.max(1)).map(|h| h as f64).collect();
    let mut s = frame.open(title, "prediction horizon (s)", "mean AP", &ticks);
    for (i, (_, points)) in series.iter().enumerate() {
        let pts: Vec<(f64, f64)> = points.iter().map(|&(h, v)| (h as f64, v)).collect();
        s.push_str(&frame.polyline(&pts, PALETTE[i % PALETTE.len()], true));
    }
    let names: Vec<String> = series.iter().map(|(n, _)| n.clone()).collect();
    s.push_str(&legend(&names));
    s.push_str("</svg>\n");
    s
}
