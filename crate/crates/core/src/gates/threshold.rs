use super::{apply_guard, ForcedUnit, GateFamily, GateMask, ImportanceScores};

/// Keeps the top `keep_fraction` of one family's gates across all layers.
/// Ties go to the lower (layer, unit) index. The kept count is
/// `round(keep_fraction * total)`, at least one.
pub fn threshold_family(
    family: GateFamily,
    scores: &[Vec<f32>],
    keep_fraction: f64,
) -> (Vec<Vec<f32>>, Vec<ForcedUnit>) {
    let mut flat: Vec<(f32, usize, usize)> = scores
        .iter()
        .enumerate()
        .flat_map(|(l, s)| s.iter().enumerate().map(move |(u, &v)| (v, l, u)))
        .collect();
    let total = flat.len();
    let keep = ((keep_fraction * total as f64).round() as usize).clamp(total.min(1), total);
    flat.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
    let mut mask: Vec<Vec<f32>> = scores.iter().map(|s| vec![0.0; s.len()]).collect();
    for &(_, l, u) in &flat[..keep] {
        mask[l][u] = 1.0;
    }
    let forced = apply_guard(family, &mut mask, scores);
    (mask, forced)
}

/// Thresholds attention and feed-forward scores separately.
pub fn threshold_scores(scores: &ImportanceScores, keep_fraction: f64) -> GateMask {
    let (attn, mut forced) = threshold_family(GateFamily::Attention, &scores.attn, keep_fraction);
    let (ff, forced_ff) = threshold_family(GateFamily::FeedForward, &scores.ff, keep_fraction);
    forced.extend(forced_ff);
    GateMask { attn, ff, forced }
}
