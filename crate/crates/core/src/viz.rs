//! SVG scatter of embeddings with GMM means and target prototypes overlaid.

use std::fmt::Write as _;

use nalgebra::{DMatrix, SymmetricEigen};

use crate::error::{Error, Result};

/// Affine map onto the top-2 principal axes of the fitted points.
#[derive(Debug, Clone, PartialEq)]
pub struct Projection {
    mean: Vec<f64>,
    axes: [Vec<f64>; 2],
}

impl Projection {
    /// Identity on the first two coordinates when `dim <= 2`, PCA otherwise.
    /// Axis signs are fixed so the largest-magnitude entry is positive.
    pub fn fit(points: &[Vec<f64>]) -> Result<Self> {
        let dim = points.first().map(Vec::len).ok_or_else(|| Error::contract("no points to project"))?;
        if points.iter().any(|p| p.len() != dim) {
            return Err(Error::contract("points differ in dimension"));
        }
        if dim <= 2 {
            let unit = |k: usize| (0..dim).map(|d| if d == k { 1.0 } else { 0.0 }).collect();
            return Ok(Projection {
                mean: vec![0.0; dim],
                axes: [unit(0), unit(1)],
            });
        }
        let n = points.len() as f64;
        let mean: Vec<f64> = (0..dim).map(|d| points.iter().map(|p| p[d]).sum::<f64>() / n).collect();
        let mut cov = DMatrix::<f64>::zeros(dim, dim);
        for p in points {
            for i in 0..dim {
                for j in 0..dim {
                    cov[(i, j)] += (p[i] - mean[i]) * (p[j] - mean[j]) / n;
                }
            }
        }
        let eig = SymmetricEigen::new(cov);
        let mut order: Vec<usize> = (0..dim).collect();
        order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]).then(a.cmp(&b)));
        let axis = |k: usize| {
            let mut v: Vec<f64> = eig.eigenvectors.column(order[k]).iter().copied().collect();
            let lead = v.iter().copied().fold(0.0f64, |m, x| if x.abs() > m.abs() { x } else { m });
            if lead < 0.0 {
                v.iter_mut().for_each(|x| *x = -*x);
            }
            v
        };
        Ok(Projection {
            mean,
            axes: [axis(0), axis(1)],
        })
    }

    pub fn apply(&self, p: &[f64]) -> (f64, f64) {
        let coord = |a: &[f64]| p.iter().zip(&self.mean).zip(a).map(|((x, m), w)| (x - m) * w).sum();
        (coord(&self.axes[0]), coord(&self.axes[1]))
    }
}

const PALETTE: [&str; 10] = [
    "#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f", "#bcbd22", "#17becf",
];

fn color(class: usize) -> &'static str {
    PALETTE[class % PALETTE.len()]
}

pub struct Scene<'a> {
    pub embeddings: &'a [Vec<f64>],
    pub predictions: &'a [usize],
    /// `(class, mean)` for every GMM component.
    pub gmm_means: &'a [(usize, Vec<f64>)],
    /// `(class, prototype)` for every initialized target prototype.
    pub prototypes: &'a [(usize, Vec<f64>)],
}

pub fn render_svg(scene: &Scene) -> Result<String> {
    if scene.embeddings.len() != scene.predictions.len() {
        return Err(Error::contract("one prediction per embedding required"));
    }
    let proj = Projection::fit(scene.embeddings)?;
    let pts: Vec<(f64, f64)> = scene.embeddings.iter().map(|e| proj.apply(e)).collect();
    let means: Vec<(usize, (f64, f64))> = scene.gmm_means.iter().map(|(c, m)| (*c, proj.apply(m))).collect();
    let protos: Vec<(usize, (f64, f64))> = scene.prototypes.iter().map(|(c, m)| (*c, proj.apply(m))).collect();

    let all = pts.iter().chain(means.iter().map(|m| &m.1)).chain(protos.iter().map(|p| &p.1));
    let (mut x0, mut x1, mut y0, mut y1) = (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY);
    for &(x, y) in all {
        x0 = x0.min(x);
        x1 = x1.max(x);
        y0 = y0.min(y);
        y1 = y1.max(y);
    }
    let span = (x1 - x0).max(y1 - y0).max(1e-9);
    let (size, pad) = (600.0, 30.0);
    let sx = |x: f64| pad + (x - x0) / span * (size - 2.0 * pad);
    let sy = |y: f64| size - pad - (y - y0) / span * (size - 2.0 * pad);

    let mut svg = String::new();
    let _ = writeln!(
        svg,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{size}" height="{size}" viewBox="0 0 {size} {size}">"#
    );
    let _ = writeln!(svg, r#"<rect width="100%" height="100%" fill="white"/>"#);
    let _ = writeln!(svg, r#"<g id="samples" fill-opacity="0.5">"#);
    for (&(x, y), &c) in pts.iter().zip(scene.predictions) {
        let _ = writeln!(svg, r#"<circle cx="{:.2}" cy="{:.2}" r="2" fill="{}"/>"#, sx(x), sy(y), color(c));
    }
    let _ = writeln!(svg, "</g>\n<g id=\"gmm-means\" stroke=\"black\" stroke-width=\"1\">");
    for (c, (x, y)) in &means {
        let (cx, cy) = (sx(*x), sy(*y));
        let _ = writeln!(
            svg,
            r#"<path d="M{:.2} {:.2} L{:.2} {:.2} L{:.2} {:.2} L{:.2} {:.2} Z" fill="{}"/>"#,
            cx,
            cy - 6.0,
            cx + 6.0,
            cy,
            cx,
            cy + 6.0,
            cx - 6.0,
            cy,
            color(*c)
        );
    }
    let _ = writeln!(svg, "</g>\n<g id=\"target-prototypes\" stroke=\"black\" stroke-width=\"1.5\">");
    for (c, (x, y)) in &protos {
        let _ = writeln!(
            svg,
            r#"<rect x="{:.2}" y="{:.2}" width="10" height="10" fill="{}"/>"#,
            sx(*x) - 5.0,
            sy(*y) - 5.0,
            color(*c)
        );
    }
    let _ = writeln!(svg, "</g>");
    let _ = writeln!(
        svg,
        r#"<text x="{pad}" y="18" font-family="sans-serif" font-size="12">dots: samples by prediction; diamonds: GMM means; squares: target prototypes</text>"#
    );
    svg.push_str("</svg>\n");
    Ok(svg)
}
