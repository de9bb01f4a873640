//! Deterministic point-set utilities: farthest point sampling, ball query,
//! and k-nearest neighbors, all mask-aware.
//!
//! These run outside the autodiff tape: neighborhood structure is data.
//! Every tie breaks toward the lower point index, so results are exactly
//! reproducible across runs and platforms.

use super::NnError;

fn dist_sq(a: [f64; 3], b: [f64; 3]) -> f64 {
    (a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)
}

fn valid_indices(valid: &[bool]) -> impl Iterator<Item = usize> + '_ {
    valid.iter().enumerate().filter_map(|(i, &v)| v.then_some(i))
}

/// Greedy farthest point sampling over the valid subset, seeded at the
/// valid point nearest the valid-point centroid. Returns `count` distinct
/// indices into `points`.
pub fn fps(points: &[[f64; 3]], valid: &[bool], count: usize) -> Result<Vec<usize>, NnError> {
    assert_eq!(points.len(), valid.len(), "mask length must match point count");
    let n_valid = valid.iter().filter(|&&v| v).count();
    if count > n_valid {
        return Err(NnError::NotEnoughPoints { count, available: n_valid });
    }
    if count == 0 {
        return Ok(Vec::new());
    }

    let mut centroid = [0.0f64; 3];
    for i in valid_indices(valid) {
        for axis in 0..3 {
            centroid[axis] += points[i][axis];
        }
    }
    for axis in &mut centroid {
        *axis /= n_valid as f64;
    }
    let seed = valid_indices(valid)
        .min_by(|&a, &b| {
            dist_sq(points[a], centroid)
                .partial_cmp(&dist_sq(points[b], centroid))
                .expect("finite distances")
                .then(a.cmp(&b))
        })
        .expect("at least one valid point");

    let mut selected = Vec::with_capacity(count);
    selected.push(seed);
    // min_dist[i] = squared distance from point i to the selected set.
    let mut min_dist: Vec<f64> = points
        .iter()
        .enumerate()
        .map(|(i, &p)| if valid[i] { dist_sq(p, points[seed]) } else { f64::NEG_INFINITY })
        .collect();

    while selected.len() < count {
        let next = min_dist
            .iter()
            .enumerate()
            .filter(|(i, _)| valid[*i] && !selected.contains(i))
            .max_by(|(ia, da), (ib, db)| {
                da.partial_cmp(db).expect("finite distances").then(ib.cmp(ia))
            })
            .map(|(i, _)| i)
            .expect("count ≤ n_valid leaves a candidate");
        selected.push(next);
        for i in valid_indices(valid) {
            let d = dist_sq(points[i], points[next]);
            if d < min_dist[i] {
                min_dist[i] = d;
            }
        }
    }
    Ok(selected)
}

/// One anchor's neighborhood from [`ball_query`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BallGroup {
    /// Exactly `nsamples` point indices (unless the cloud has no valid
    /// points at all, in which case the group is empty and flagged).
    pub indices: Vec<usize>,
    /// True when no valid point fell inside the radius.
    pub empty: bool,
}

/// Per anchor, up to `nsamples` valid points within `radius`, taken in
/// index order. Short groups are completed by repeating the nearest
/// in-radius point; an isolated anchor gets its globally nearest valid
/// point repeated and the `empty` flag set.
pub fn ball_query(
    points: &[[f64; 3]],
    valid: &[bool],
    anchors: &[[f64; 3]],
    radius: f64,
    nsamples: usize,
) -> Result<Vec<BallGroup>, NnError> {
    assert_eq!(points.len(), valid.len(), "mask length must match point count");
    if !(radius.is_finite() && radius > 0.0) {
        return Err(NnError::BadConfig(format!("ball query radius must be positive, got {radius}")));
    }
    if nsamples == 0 {
        return Err(NnError::BadConfig("ball query needs nsamples ≥ 1".into()));
    }
    let r_sq = radius * radius;
    let mut groups = Vec::with_capacity(anchors.len());
    for &anchor in anchors {
        let mut indices: Vec<usize> = Vec::new();
        let mut nearest_in: Option<(usize, f64)> = None;
        let mut nearest_any: Option<(usize, f64)> = None;
        for i in valid_indices(valid) {
            let d = dist_sq(points[i], anchor);
            if nearest_any.map_or(true, |(_, best)| d < best) {
                nearest_any = Some((i, d));
            }
            if d <= r_sq {
                if indices.len() < nsamples {
                    indices.push(i);
                }
                if nearest_in.map_or(true, |(_, best)| d < best) {
                    nearest_in = Some((i, d));
                }
            }
        }
        let empty = indices.is_empty();
        let filler = if empty { nearest_any.map(|(i, _)| i) } else { nearest_in.map(|(i, _)| i) };
        if let Some(f) = filler {
            while indices.len() < nsamples {
                indices.push(f);
            }
        }
        groups.push(BallGroup { indices, empty });
    }
    Ok(groups)
}

/// Indices of the `k` valid points nearest to `anchor`, distance-sorted,
/// ties broken by lower index. Clouds smaller than `k` are completed by
/// cycling the distance-sorted list.
pub fn knn(
    points: &[[f64; 3]],
    valid: &[bool],
    anchor: [f64; 3],
    k: usize,
) -> Result<Vec<usize>, NnError> {
    assert_eq!(points.len(), valid.len(), "mask length must match point count");
    let mut order: Vec<usize> = valid_indices(valid).collect();
    if order.is_empty() {
        return Err(NnError::EmptyCloud);
    }
    order.sort_by(|&a, &b| {
        dist_sq(points[a], anchor)
            .partial_cmp(&dist_sq(points[b], anchor))
            .expect("finite distances")
            .then(a.cmp(&b))
    });
    Ok((0..k).map(|i| order[i % order.len()]).collect())
}
