//! SVG decision-boundary plots for 2-D models: labeled points colored by
//! class, unlabeled points gray, and the classifier boundary drawn as
//! segments between grid cells whose predicted class differs.

use crate::data::SemiDataset;
use crate::error::{Error, Result};
use crate::model::ScnfModel;
use crate::tensor::Tensor;

const PALETTE: [&str; 6] = ["#d62728", "#1f77b4", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b"];

pub struct BoundaryPlot {
    pub svg: String,
    /// Number of boundary segments drawn (0 for a constant classifier).
    pub segments: usize,
}

/// Classify a `grid x grid` lattice over the data bounding box (plus a
/// margin) and emit the plot.
pub fn boundary_svg(model: &ScnfModel, data: &SemiDataset, grid: usize) -> Result<BoundaryPlot> {
    if model.input_dim != 2 {
        return Err(Error::Argument(format!(
            "boundary plot wants a 2-D model, input dimension is {}",
            model.input_dim
        )));
    }
    let (mut x0, mut x1) = (f64::INFINITY, f64::NEG_INFINITY);
    let (mut y0, mut y1) = (f64::INFINITY, f64::NEG_INFINITY);
    let mut visit = |t: &Tensor| {
        for i in 0..t.rows() {
            let r = t.row(i);
            x0 = x0.min(r[0]);
            x1 = x1.max(r[0]);
            y0 = y0.min(r[1]);
            y1 = y1.max(r[1]);
        }
    };
    visit(&data.labeled_x);
    visit(&data.unlabeled_x);
    if !x0.is_finite() {
        return Err(Error::Argument("boundary plot: no points to bound".into()));
    }
    let mx = 0.15 * (x1 - x0).max(1e-6);
    let my = 0.15 * (y1 - y0).max(1e-6);
    let (x0, x1, y0, y1) = (x0 - mx, x1 + mx, y0 - my, y1 + my);

    // classify the lattice row by row
    let mut classes = vec![0usize; grid * grid];
    for gy in 0..grid {
        let py = y0 + (y1 - y0) * (gy as f64 + 0.5) / grid as f64;
        let mut rows = Vec::with_capacity(grid * 2);
        for gx in 0..grid {
            let px = x0 + (x1 - x0) * (gx as f64 + 0.5) / grid as f64;
            rows.push(px);
            rows.push(py);
        }
        let batch = Tensor::new(vec![grid, 2], rows)?;
        let preds = model.classify_batch(&batch)?;
        classes[gy * grid..(gy + 1) * grid].copy_from_slice(&preds);
    }

    let width = 640.0;
    let height = 640.0;
    let sx = |px: f64| (px - x0) / (x1 - x0) * width;
    let sy = |py: f64| height - (py - y0) / (y1 - y0) * height;
    let cell_w = width / grid as f64;
    let cell_h = height / grid as f64;

    let mut svg = String::new();
    svg.push_str(&format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{width}\" height=\"{height}\" viewBox=\"0 0 {width} {height}\">\n"
    ));
    svg.push_str("<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n");

    // boundary: edges between horizontally/vertically adjacent cells with
    // different predictions
    let mut path = String::new();
    let mut segments = 0usize;
    for gy in 0..grid {
        for gx in 0..grid {
            let c = classes[gy * grid + gx];
            if gx + 1 < grid && classes[gy * grid + gx + 1] != c {
                let ex = (gx + 1) as f64 * cell_w;
                let ey = height - gy as f64 * cell_h;
                path.push_str(&format!(
                    "M{ex:.2} {ey:.2} L{ex:.2} {:.2} ",
                    height - (gy + 1) as f64 * cell_h
                ));
                segments += 1;
            }
            if gy + 1 < grid && classes[(gy + 1) * grid + gx] != c {
                let ex = gx as f64 * cell_w;
                let ey = height - (gy + 1) as f64 * cell_h;
                path.push_str(&format!("M{ex:.2} {ey:.2} L{:.2} {ey:.2} ", (gx + 1) as f64 * cell_w));
                segments += 1;
            }
        }
    }
    if segments > 0 {
        svg.push_str(&format!(
            "<path d=\"{}\" stroke=\"black\" stroke-width=\"1.5\" fill=\"none\"/>\n",
            path.trim_end()
        ));
    }

    for i in 0..data.unlabeled_x.rows() {
        let r = data.unlabeled_x.row(i);
        svg.push_str(&format!(
            "<circle cx=\"{:.2}\" cy=\"{:.2}\" r=\"1.5\" fill=\"#bbbbbb\"/>\n",
            sx(r[0]),
            sy(r[1])
        ));
    }
    for i in 0..data.labeled_x.rows() {
        let r = data.labeled_x.row(i);
        let color = PALETTE[data.labeled_y[i] % PALETTE.len()];
        svg.push_str(&format!(
            "<circle cx=\"{:.2}\" cy=\"{:.2}\" r=\"5\" fill=\"{color}\" stroke=\"black\" stroke-width=\"1\"/>\n",
            sx(r[0]),
            sy(r[1])
        ));
    }
    svg.push_str("</svg>\n");
    Ok(BoundaryPlot { svg, segments })
}

/// Minimal XML well-formedness check: tags balance, attributes are quoted.
pub fn xml_well_formed(text: &str) -> bool {
    let mut stack: Vec<String> = Vec::new();
    let bytes = text.as_bytes();
    let mut i = 0;
    while i < bytes.len() {
        if bytes[i] != b'<' {
            i += 1;
            continue;
        }
        let Some(end) = text[i..].find('>').map(|e| i + e) else {
            return false;
        };
        let tag = &text[i + 1..end];
        if let Some(name) = tag.strip_prefix('/') {
            match stack.pop() {
                Some(open) if open == name.trim() => {}
                _ => return false,
            }
        } else if tag.starts_with('?') || tag.starts_with('!') || tag.ends_with('/') {
            // declaration, comment, or self-closing
        } else {
            let name = tag.split_whitespace().next().unwrap_or("");
            if name.is_empty() {
                return false;
            }
            // attribute quotes must balance inside the tag
            if tag.matches('"').count() % 2 != 0 {
                return false;
            }
            stack.push(name.to_string());
        }
        i = end + 1;
    }
    stack.is_empty()
}
