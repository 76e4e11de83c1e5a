//! SVG figures: success / precision / normalized precision plots per
//! modality, and attribute radar charts.

use std::f64::consts::PI;
use std::fs;
use std::path::{Path, PathBuf};

use plotters::prelude::*;

use super::{Attribute, MetricCurve, Modality, Summary};
use crate::error::{Error, Result};

/// Most trackers drawn in one figure; the best-scoring ones are kept.
pub const TOP_K: usize = 8;

const SIZE: (u32, u32) = (640, 480);

fn plot_err(e: impl std::fmt::Display) -> Error {
    Error::data(format!("plot: {e}"))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Metric {
    Success,
    Precision,
    NormPrecision,
}

impl Metric {
    pub const ALL: [Metric; 3] = [Metric::Success, Metric::Precision, Metric::NormPrecision];

    fn file_stem(self) -> &'static str {
        match self {
            Metric::Success => "success",
            Metric::Precision => "precision",
            Metric::NormPrecision => "norm_precision",
        }
    }

    fn title(self) -> &'static str {
        match self {
            Metric::Success => "Success plots of OPE",
            Metric::Precision => "Precision plots of OPE",
            Metric::NormPrecision => "Normalized precision plots of OPE",
        }
    }

    fn x_desc(self) -> &'static str {
        match self {
            Metric::Success => "Overlap threshold",
            Metric::Precision => "Location error threshold (px)",
            Metric::NormPrecision => "Normalized location error threshold",
        }
    }

    fn curve(self, s: &Summary) -> &MetricCurve {
        match self {
            Metric::Success => &s.curves.success,
            Metric::Precision => &s.curves.precision,
            Metric::NormPrecision => &s.curves.norm_precision,
        }
    }
}

/// Summaries of one modality ordered by the metric's score, best first
/// (ties by tracker name), truncated to [`TOP_K`].
pub fn ranked<'a>(summaries: &'a [Summary], modality: Modality, metric: Metric) -> Vec<&'a Summary> {
    let mut v: Vec<&Summary> = summaries.iter().filter(|s| s.modality == modality).collect();
    v.sort_by(|a, b| {
        metric
            .curve(b)
            .summary
            .total_cmp(&metric.curve(a).summary)
            .then_with(|| a.tracker.cmp(&b.tracker))
    });
    v.truncate(TOP_K);
    v
}

fn legend_label(s: &Summary, metric: Metric) -> String {
    format!("{} [{:.3}]", s.tracker, metric.curve(s).summary)
}

/// Renders one curve figure to an SVG string.
pub fn curve_svg(summaries: &[Summary], modality: Modality, metric: Metric) -> Result<String> {
    let entries = ranked(summaries, modality, metric);
    let first = entries.first().ok_or_else(|| Error::data(format!("no {modality} summaries to plot")))?;
    let xs = &metric.curve(first).thresholds;
    let x_max = xs.last().copied().unwrap_or(1.0);
    let mut svg = String::new();
    {
        let root = SVGBackend::with_string(&mut svg, SIZE).into_drawing_area();
        root.fill(&WHITE).map_err(plot_err)?;
        let mut chart = ChartBuilder::on(&root)
            .caption(format!("{} - {modality}", metric.title()), ("sans-serif", 20))
            .margin(12)
            .x_label_area_size(40)
            .y_label_area_size(50)
            .build_cartesian_2d(0f64..x_max, 0f64..1f64)
            .map_err(plot_err)?;
        chart
            .configure_mesh()
            .x_desc(metric.x_desc())
            .y_desc("Fraction of frames")
            .draw()
            .map_err(plot_err)?;
        for (k, s) in entries.iter().enumerate() {
            let c = metric.curve(s);
            let color = Palette99::pick(k).to_rgba();
            chart
                .draw_series(LineSeries::new(
                    c.thresholds.iter().copied().zip(c.values.iter().copied()),
                    color.stroke_width(2),
                ))
                .map_err(plot_err)?
                .label(legend_label(s, metric))
                .legend(move |(x, y)| PathElement::new(vec![(x, y), (x + 20, y)], color.stroke_width(2)));
        }
        let pos = match metric {
            Metric::Success => SeriesLabelPosition::LowerLeft,
            _ => SeriesLabelPosition::LowerRight,
        };
        chart
            .configure_series_labels()
            .position(pos)
            .background_style(WHITE.mix(0.85))
            .border_style(BLACK)
            .draw()
            .map_err(plot_err)?;
        root.present().map_err(plot_err)?;
    }
    Ok(svg)
}

/// Attributes that have a row in at least one summary, in canonical order.
fn radar_axes(entries: &[&Summary]) -> Vec<Attribute> {
    Attribute::ALL
        .into_iter()
        .filter(|a| entries.iter().any(|s| s.per_attribute.contains_key(a.name())))
        .collect()
}

/// Radar chart of per-attribute success (or precision) scores.
pub fn radar_svg(summaries: &[Summary], modality: Modality, metric: Metric) -> Result<String> {
    let entries = ranked(summaries, modality, metric);
    if entries.is_empty() {
        return Err(Error::data(format!("no {modality} summaries to plot")));
    }
    let axes = radar_axes(&entries);
    let score = |s: &Summary, a: Attribute| {
        s.per_attribute.get(a.name()).map_or(0.0, |r| match metric {
            Metric::Success => r.sr,
            Metric::Precision => r.pr,
            Metric::NormPrecision => r.npr,
        })
    };
    let n = axes.len().max(1);
    let angle = |i: usize| PI / 2.0 - 2.0 * PI * i as f64 / n as f64;
    let mut svg = String::new();
    {
        let root = SVGBackend::with_string(&mut svg, (560, 560)).into_drawing_area();
        root.fill(&WHITE).map_err(plot_err)?;
        let mut chart = ChartBuilder::on(&root)
            .caption(format!("Attribute {} - {modality}", metric.file_stem()), ("sans-serif", 20))
            .margin(20)
            .build_cartesian_2d(-1.35f64..1.35f64, -1.35f64..1.35f64)
            .map_err(plot_err)?;
        let grey = RGBColor(200, 200, 200);
        for ring in [0.25, 0.5, 0.75, 1.0] {
            let pts: Vec<(f64, f64)> = (0..=n).map(|i| (ring * angle(i).cos(), ring * angle(i).sin())).collect();
            chart.draw_series(std::iter::once(PathElement::new(pts, grey))).map_err(plot_err)?;
        }
        for (i, a) in axes.iter().enumerate() {
            let (c, s) = (angle(i).cos(), angle(i).sin());
            chart
                .draw_series(std::iter::once(PathElement::new(vec![(0.0, 0.0), (c, s)], grey)))
                .map_err(plot_err)?;
            chart
                .draw_series(std::iter::once(Text::new(
                    a.name().to_string(),
                    (1.15 * c - 0.07, 1.15 * s + 0.03),
                    ("sans-serif", 14),
                )))
                .map_err(plot_err)?;
        }
        for (k, s) in entries.iter().enumerate() {
            let color = Palette99::pick(k).to_rgba();
            let pts: Vec<(f64, f64)> = (0..=n)
                .map(|i| {
                    let r = axes.get(i % n).map_or(0.0, |&a| score(s, a));
                    (r * angle(i).cos(), r * angle(i).sin())
                })
                .collect();
            let all = s.per_attribute.get("ALL").map_or(0.0, |r| match metric {
                Metric::Success => r.sr,
                Metric::Precision => r.pr,
                Metric::NormPrecision => r.npr,
            });
            chart
                .draw_series(std::iter::once(PathElement::new(pts, color.stroke_width(2))))
                .map_err(plot_err)?
                .label(format!("{} [{all:.3}]", s.tracker))
                .legend(move |(x, y)| PathElement::new(vec![(x, y), (x + 20, y)], color.stroke_width(2)));
        }
        chart
            .configure_series_labels()
            .position(SeriesLabelPosition::LowerRight)
            .background_style(WHITE.mix(0.85))
            .border_style(BLACK)
            .draw()
            .map_err(plot_err)?;
        root.present().map_err(plot_err)?;
    }
    Ok(svg)
}

/// Writes every figure for the modalities present in `summaries` and
/// returns the paths in creation order.
pub fn emit_plots(summaries: &[Summary], out_dir: &Path) -> Result<Vec<PathBuf>> {
    if summaries.is_empty() {
        return Err(Error::data("no summaries to plot"));
    }
    fs::create_dir_all(out_dir)?;
    let mut written = Vec::new();
    for m in Modality::BOTH {
        if !summaries.iter().any(|s| s.modality == m) {
            continue;
        }
        for metric in Metric::ALL {
            let p = out_dir.join(format!("{}_{m}.svg", metric.file_stem()));
            fs::write(&p, curve_svg(summaries, m, metric)?)?;
            written.push(p);
        }
        for metric in [Metric::Success, Metric::Precision] {
            let p = out_dir.join(format!("radar_{}_{m}.svg", metric.file_stem()));
            fs::write(&p, radar_svg(summaries, m, metric)?)?;
            written.push(p);
        }
    }
    Ok(written)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::boxgeom::BBox;
    use crate::evalkit::{evaluate, tests::synthetic, Protocol, SequenceResult};

    fn summaries(names: &[(&str, f64)]) -> Vec<Summary> {
        let gt: Vec<BBox> = (0..10).map(|i| BBox::new(i as f64, 5.0, 10.0, 10.0)).collect();
        let ann = synthetic("s", gt.clone(), gt.clone(), vec![Attribute::OC, Attribute::SV]);
        names
            .iter()
            .flat_map(|(n, shift)| {
                let moved: Vec<BBox> = gt.iter().map(|b| BBox::new(b.x + shift, b.y, b.w, b.h)).collect();
                let r = SequenceResult {
                    name: "s".into(),
                    rgb: moved.clone(),
                    sonar: moved,
                };
                evaluate(n, &[r], std::slice::from_ref(&ann), &Protocol::default()).unwrap()
            })
            .collect()
    }

    #[test]
    fn legend_sorted_and_capped() {
        let names: Vec<(String, f64)> = (0..10).map(|i| (format!("t{i}"), i as f64)).collect();
        let refs: Vec<(&str, f64)> = names.iter().map(|(n, s)| (n.as_str(), *s)).collect();
        let s = summaries(&refs);
        let r = ranked(&s, Modality::Rgb, Metric::Success);
        assert_eq!(r.len(), TOP_K);
        assert_eq!(r[0].tracker, "t0");
        for w in r.windows(2) {
            assert!(w[0].sr >= w[1].sr);
        }
    }

    #[test]
    fn single_tracker_legend_and_determinism() {
        let s = summaries(&[("mine", 2.0)]);
        let a = curve_svg(&s, Modality::Sonar, Metric::Precision).unwrap();
        let b = curve_svg(&s, Modality::Sonar, Metric::Precision).unwrap();
        assert_eq!(a, b);
        assert!(a.contains(&format!("mine [{:.3}]", s[1].pr)));
        let r = radar_svg(&s, Modality::Rgb, Metric::Success).unwrap();
        assert!(r.contains("OC") && r.contains("mine"));
    }

    #[test]
    fn two_trackers_both_listed() {
        let dir = tempfile::tempdir().unwrap();
        let s = summaries(&[("alpha", 1.0), ("beta", 4.0)]);
        let files = emit_plots(&s, dir.path()).unwrap();
        assert_eq!(files.len(), 10);
        let text = fs::read_to_string(dir.path().join("success_rgb.svg")).unwrap();
        assert!(text.contains("alpha") && text.contains("beta"));
    }
}
