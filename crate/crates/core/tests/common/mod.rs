//! Brute-force reference implementations used as test oracles. They trade
//! speed for obviousness and share no code with the library.
#![allow(dead_code)]

/// Minimum total Euclidean distance over all injective matchings of the
/// smaller set into the larger one.
pub fn brute_min_matching(preds: &[(f64, f64)], truths: &[(f64, f64)]) -> f64 {
    let (small, large) = if preds.len() <= truths.len() {
        (preds, truths)
    } else {
        (truths, preds)
    };
    let mut used = vec![false; large.len()];
    fn go(i: usize, small: &[(f64, f64)], large: &[(f64, f64)], used: &mut [bool]) -> f64 {
        if i == small.len() {
            return 0.0;
        }
        let mut best = f64::INFINITY;
        for j in 0..large.len() {
            if used[j] {
                continue;
            }
            used[j] = true;
            let d = ((small[i].0 - large[j].0).powi(2) + (small[i].1 - large[j].1).powi(2)).sqrt();
            best = best.min(d + go(i + 1, small, large, used));
            used[j] = false;
        }
        best
    }
    go(0, small, large, &mut used)
}

/// IoU of integer boxes by counting unit pixels covered by each box.
pub fn raster_iou(a: [i32; 4], b: [i32; 4]) -> f64 {
    let lo_x = a[0].min(b[0]);
    let hi_x = a[2].max(b[2]);
    let lo_y = a[1].min(b[1]);
    let hi_y = a[3].max(b[3]);
    let inside = |r: [i32; 4], x: i32, y: i32| x >= r[0] && x < r[2] && y >= r[1] && y < r[3];
    let (mut inter, mut union) = (0u64, 0u64);
    for y in lo_y..hi_y {
        for x in lo_x..hi_x {
            let (ia, ib) = (inside(a, x, y), inside(b, x, y));
            inter += u64::from(ia && ib);
            union += u64::from(ia || ib);
        }
    }
    if union == 0 {
        0.0
    } else {
        inter as f64 / union as f64
    }
}

fn float_iou(a: [f64; 4], b: [f64; 4]) -> f64 {
    let iw = (a[2].min(b[2]) - a[0].max(b[0])).max(0.0);
    let ih = (a[3].min(b[3]) - a[1].max(b[1])).max(0.0);
    let inter = iw * ih;
    let union = (a[2] - a[0]) * (a[3] - a[1]) + (b[2] - b[0]) * (b[3] - b[1]) - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

/// One image of a single-class detection fixture. Predictions are listed in
/// model output order.
pub struct OracleImage {
    pub id: String,
    pub preds: Vec<[f64; 4]>,
    pub truths: Vec<[f64; 4]>,
}

/// 101-point interpolated AP computed from first principles:
/// 1. rank every prediction by 1/(1+position), ties by image id then position;
/// 2. walk the ranking, marking a TP when the best-overlapping still-free truth
///    box in the same image reaches the threshold;
/// 3. at each recall level r/100, take the highest precision achieved at any
///    cut-off whose recall is at least r/100 (compared in exact integers).
pub fn brute_ap(images: &[OracleImage], threshold: f64) -> f64 {
    let n_truth: usize = images.iter().map(|i| i.truths.len()).sum();
    if n_truth == 0 {
        return 0.0;
    }
    let mut ranked: Vec<(usize, &str, usize)> = Vec::new();
    for (ii, img) in images.iter().enumerate() {
        for pos in 0..img.preds.len() {
            ranked.push((ii, img.id.as_str(), pos));
        }
    }
    ranked.sort_by(|a, b| a.2.cmp(&b.2).then(a.1.cmp(b.1)));

    let mut free: Vec<Vec<bool>> = images.iter().map(|i| vec![true; i.truths.len()]).collect();
    // Greedy matching is per image in output order, which is exactly the
    // global order restricted to one image.
    let mut hit = vec![false; ranked.len()];
    for (k, &(ii, _, pos)) in ranked.iter().enumerate() {
        let p = images[ii].preds[pos];
        let mut best: Option<(usize, f64)> = None;
        for (j, t) in images[ii].truths.iter().enumerate() {
            if !free[ii][j] {
                continue;
            }
            let v = float_iou(p, *t);
            if best.is_none_or(|(_, bv)| v > bv) {
                best = Some((j, v));
            }
        }
        if let Some((j, v)) = best {
            if v >= threshold {
                free[ii][j] = false;
                hit[k] = true;
            }
        }
    }

    let mut tp = 0usize;
    let mut curve: Vec<(usize, usize)> = Vec::new(); // (tp, predictions so far)
    for (k, h) in hit.iter().enumerate() {
        tp += usize::from(*h);
        curve.push((tp, k + 1));
    }
    let mut sum = 0.0;
    for r in 0..=100usize {
        let best = curve
            .iter()
            .filter(|(tp, _)| tp * 100 >= r * n_truth)
            .map(|(tp, n)| *tp as f64 / *n as f64)
            .fold(0.0, f64::max);
        sum += best;
    }
    sum / 101.0
}
