use std::fmt::Write as _;

use nalgebra::{DMatrix, SymmetricEigen};

use super::{EmbeddingMatrix, EvalError};

/// 2-D PCA coordinates for two paired sets of points.
#[derive(Clone, Debug, PartialEq)]
pub struct Projection {
    pub a: Vec<[f64; 2]>,
    pub b: Vec<[f64; 2]>,
    /// Variance along each component.
    pub variances: [f64; 2],
}

/// Projects the union of `a` and `b` onto its top two principal directions.
/// Each direction's largest-magnitude coordinate is made positive.
pub fn pca_project(a: &EmbeddingMatrix, b: &EmbeddingMatrix) -> Result<Projection, EvalError> {
    let d = a.dim();
    if b.dim() != d {
        return Err(EvalError::Invalid(format!("dims differ: {d} vs {}", b.dim())));
    }
    let n = a.rows() + b.rows();
    if n < 2 || d < 2 {
        return Err(EvalError::Invalid("need at least 2 points of dimension >= 2".into()));
    }
    let rows: Vec<&[f32]> = (0..a.rows()).map(|i| a.row(i)).chain((0..b.rows()).map(|i| b.row(i))).collect();
    if rows.iter().all(|r| *r == rows[0]) {
        return Err(EvalError::DegenerateVariance);
    }
    let x = DMatrix::from_fn(n, d, |i, j| rows[i][j] as f64);
    let mean = x.row_mean();
    let mut centred = x;
    for mut r in centred.row_iter_mut() {
        r -= &mean;
    }
    let cov = centred.transpose() * &centred / n as f64;
    let eig = SymmetricEigen::new(cov);
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&i, &j| eig.eigenvalues[j].total_cmp(&eig.eigenvalues[i]).then(i.cmp(&j)));
    let mut comps = Vec::with_capacity(2);
    for &k in &order[..2] {
        let mut v = eig.eigenvectors.column(k).into_owned();
        let mut big = 0;
        for j in 1..d {
            if v[j].abs() > v[big].abs() {
                big = j;
            }
        }
        if v[big] < 0.0 {
            v = -v;
        }
        comps.push(v);
    }
    let coords: Vec<[f64; 2]> = centred.row_iter().map(|r| [r.dot(&comps[0].transpose()), r.dot(&comps[1].transpose())]).collect();
    let variances = [0, 1].map(|c| coords.iter().map(|p| p[c] * p[c]).sum::<f64>() / n as f64);
    let (pa, pb) = coords.split_at(a.rows());
    Ok(Projection {
        a: pa.to_vec(),
        b: pb.to_vec(),
        variances,
    })
}

impl Projection {
    pub fn to_tsv(&self) -> String {
        let mut s = String::from("set\tindex\tx\ty\n");
        for (set, pts) in [("a", &self.a), ("b", &self.b)] {
            for (i, p) in pts.iter().enumerate() {
                let _ = writeln!(s, "{set}\t{i}\t{}\t{}", p[0], p[1]);
            }
        }
        s
    }
}

/// Scatter plot: `+` for set A, `−` for set B, each labelled with its index.
pub fn render_svg(p: &Projection, title: &str) -> String {
    const W: f64 = 640.0;
    const H: f64 = 640.0;
    const M: f64 = 40.0;
    let all = p.a.iter().chain(&p.b);
    let (mut x0, mut x1, mut y0, mut y1) = (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY);
    for q in all {
        x0 = x0.min(q[0]);
        x1 = x1.max(q[0]);
        y0 = y0.min(q[1]);
        y1 = y1.max(q[1]);
    }
    let sx = if x1 > x0 { (W - 2.0 * M) / (x1 - x0) } else { 1.0 };
    let sy = if y1 > y0 { (H - 2.0 * M) / (y1 - y0) } else { 1.0 };
    let px = |q: &[f64; 2]| (M + (q[0] - x0) * sx, H - M - (q[1] - y0) * sy);
    let mut s = String::new();
    let _ = writeln!(s, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}">"#);
    let _ = writeln!(s, r#"<rect width="100%" height="100%" fill="white"/>"#);
    let _ = writeln!(s, r#"<text x="{M}" y="24" font-family="sans-serif" font-size="14">{}</text>"#, escape(title));
    for (marker, colour, pts) in [("+", "#1f5fbf", &p.a), ("\u{2212}", "#c0392b", &p.b)] {
        for (i, q) in pts.iter().enumerate() {
            let (x, y) = px(q);
            let _ = writeln!(
                s,
                r#"<text x="{x:.2}" y="{y:.2}" fill="{colour}" font-family="sans-serif" font-size="16" text-anchor="middle" dominant-baseline="central">{marker}</text>"#
            );
            let _ = writeln!(
                s,
                r#"<text x="{:.2}" y="{:.2}" fill="{colour}" font-family="sans-serif" font-size="9">{i}</text>"#,
                x + 6.0,
                y - 6.0
            );
        }
    }
    s.push_str("</svg>\n");
    s
}

fn escape(t: &str) -> String {
    t.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}
