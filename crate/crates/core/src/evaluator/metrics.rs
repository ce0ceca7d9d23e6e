use crate::geometry::{mm_per_unit, RigidParams2D};

/// Side of the square target-point lattice used by [`tre`].
pub const TRE_GRID: usize = 4;

/// Target points: a 4x4 lattice spanning the central half of the image,
/// i.e. `[-0.5, 0.5]` per axis in normalized coordinates.
pub fn tre_targets() -> Vec<[f64; 2]> {
    lattice(TRE_GRID)
}

pub(crate) fn lattice(n: usize) -> Vec<[f64; 2]> {
    let coord = |k: usize| -0.5 + k as f64 / (n - 1) as f64;
    (0..n)
        .flat_map(|i| (0..n).map(move |j| [coord(j), coord(i)]))
        .collect()
}

pub(crate) fn tre_on(points: &[[f64; 2]], est: RigidParams2D, gt: RigidParams2D, mm: f64) -> f64 {
    let (me, mg) = (est.to_matrix(), gt.to_matrix());
    let sum: f64 = points
        .iter()
        .map(|&p| {
            let (a, b) = (me.apply(p), mg.apply(p));
            (a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)
        })
        .sum();
    (sum / points.len() as f64).sqrt() * mm
}

/// Target registration error in millimetres: RMS over [`tre_targets`] of
/// the distance between the points mapped by `est` and by `gt`.
pub fn tre(est: RigidParams2D, gt: RigidParams2D, spacing_mm: f64, size_px: usize) -> f64 {
    tre_on(&tre_targets(), est, gt, mm_per_unit(spacing_mm, size_px))
}

/// Average ranks (1-based); ties share the mean of their positions.
pub fn ranks(values: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut out = vec![0.0; values.len()];
    let mut start = 0;
    while start < order.len() {
        let mut end = start + 1;
        while end < order.len() && values[order[end]] == values[order[start]] {
            end += 1;
        }
        let rank = (start + end + 1) as f64 / 2.0;
        for &i in &order[start..end] {
            out[i] = rank;
        }
        start = end;
    }
    out
}

pub fn pearson(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        let (dx, dy) = (x - ma, y - mb);
        sab += dx * dy;
        saa += dx * dx;
        sbb += dy * dy;
    }
    if saa == 0.0 || sbb == 0.0 {
        return 0.0;
    }
    sab / (saa * sbb).sqrt()
}

/// Spearman rank correlation with average ranks for ties. Returns 0 when
/// either input is constant.
pub fn spearman(a: &[f64], b: &[f64]) -> f64 {
    pearson(&ranks(a), &ranks(b))
}

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct Summary {
    pub mean: f64,
    pub median: f64,
    pub std: f64,
}

/// Mean, median and population standard deviation.
pub fn summarize(values: &[f64]) -> Summary {
    if values.is_empty() {
        return Summary {
            mean: f64::NAN,
            median: f64::NAN,
            std: f64::NAN,
        };
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let mid = sorted.len() / 2;
    let median = if sorted.len().is_multiple_of(2) {
        (sorted[mid - 1] + sorted[mid]) / 2.0
    } else {
        sorted[mid]
    };
    Summary {
        mean,
        median,
        std: var.sqrt(),
    }
}
