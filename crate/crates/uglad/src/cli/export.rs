//! DOT graph export. Edges are drawn where the partial correlation
//! `-Θ_ij / sqrt(Θ_ii Θ_jj)` exceeds a threshold in magnitude; positive
//! partial correlations are green, negative red, and the pen width grows
//! with the magnitude.

use super::CliError;
use crate::linalg::Matrix;

/// Default threshold on |partial correlation|: the learned thresholding
/// leaves near-zero rather than exactly-zero entries.
pub const DEFAULT_EDGE_THRESHOLD: f64 = 1e-3;

/// Renders the DOT text for a precision matrix with named features.
pub fn render_dot(
    precision: &Matrix,
    features: &[String],
    threshold: f64,
) -> Result<String, CliError> {
    if threshold < 0.0 || !threshold.is_finite() {
        return Err(CliError::InvalidArgument(format!(
            "edge threshold must be a finite non-negative number, got {threshold}"
        )));
    }
    let d = precision.rows();
    if precision.cols() != d {
        return Err(CliError::Data("precision matrix must be square".into()));
    }
    if features.len() != d {
        return Err(CliError::Data(format!(
            "{} feature names for a {d}x{d} matrix",
            features.len()
        )));
    }
    for i in 0..d {
        if precision.at(i, i) <= 0.0 {
            return Err(CliError::Data(format!(
                "diagonal entry {i} is not positive; cannot form partial correlations"
            )));
        }
    }

    let mut out = String::new();
    out.push_str("graph precision {\n");
    out.push_str("  layout=neato;\n  overlap=false;\n  node [shape=ellipse];\n");
    for name in features {
        out.push_str(&format!("  \"{}\";\n", escape(name)));
    }
    for i in 0..d {
        for j in (i + 1)..d {
            let pc = -precision.at(i, j) / (precision.at(i, i) * precision.at(j, j)).sqrt();
            if pc.abs() > threshold {
                let color = if pc > 0.0 { "green" } else { "red" };
                let width = 0.5 + 4.0 * pc.abs();
                out.push_str(&format!(
                    "  \"{}\" -- \"{}\" [color={color}, penwidth={width:.3}, weight={:.6}];\n",
                    escape(&features[i]),
                    escape(&features[j]),
                    pc.abs()
                ));
            }
        }
    }
    out.push_str("}\n");
    Ok(out)
}

fn escape(name: &str) -> String {
    name.replace('"', "\\\"")
}
