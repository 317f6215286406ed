use crate::error::{Error, Result};

/// Exact 1-D Wasserstein-1 distance between two equal-size empirical
/// measures, computed as the area between their step CDFs.
///
/// This deliberately avoids the sort-and-pair route: all points are merged,
/// and `|F_a(t) - F_b(t)|` is integrated across consecutive breakpoints.
pub fn exact_w1_1d(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::Usage(format!(
            "exact_w1_1d needs equal lengths, got {} and {}",
            a.len(),
            b.len()
        )));
    }
    if a.is_empty() {
        return Ok(0.0);
    }
    // +1 for a-points, -1 for b-points; the running sum is n·(F_a - F_b)
    let mut events: Vec<(f64, i64)> = a
        .iter()
        .map(|&x| (x, 1))
        .chain(b.iter().map(|&x| (x, -1)))
        .collect();
    events.sort_unstable_by(|x, y| x.0.total_cmp(&y.0));
    let n = a.len() as f64;
    let mut area = 0.0;
    let mut diff = 0i64;
    for w in events.windows(2) {
        diff += w[0].1;
        let width = w[1].0 - w[0].0;
        if diff != 0 && width > 0.0 {
            area += diff.unsigned_abs() as f64 * width;
        }
    }
    Ok(area / n)
}
