//! Small numeric helpers used across modules.

/// ln(2*pi), enough digits to round to the nearest f64.
pub const LN_2PI: f64 = 1.8378770664093454835606594728112;

/// Responsibilities are clamped to this floor before taking logs, so the
/// x*ln(x) entropy terms stay finite. Entries that are exactly zero contribute
/// nothing (the 0*ln(0) = 0 convention).
pub const RESP_LOG_FLOOR: f64 = 1e-12;

/// Numerically stable log(sum(exp(v))) with max subtraction.
/// Empty input gives -inf.
pub fn logsumexp(v: &[f64]) -> f64 {
    let m = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if !m.is_finite() {
        return m;
    }
    let s: f64 = v.iter().map(|&x| (x - m).exp()).sum();
    m + s.ln()
}

/// In-place softmax of a slice of log-scores; returns the logsumexp so callers
/// can keep the normalizer.
pub fn softmax_in_place(v: &mut [f64]) -> f64 {
    let lse = logsumexp(v);
    for x in v.iter_mut() {
        *x = (*x - lse).exp();
    }
    lse
}

/// x * ln(clamp(x)) with the 0*ln(0) = 0 convention; used by entropy sums.
pub fn xlogx(x: f64) -> f64 {
    if x == 0.0 {
        0.0
    } else {
        x * x.max(RESP_LOG_FLOOR).ln()
    }
}

/// SplitMix64 step, used to derive independent per-item seeds from a master
/// seed (`splitmix64(master ^ index)`); identical across platforms.
pub fn splitmix64(seed: u64) -> u64 {
    let mut z = seed.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Derives the seed for item `index` of a dataset-level operation.
pub fn item_seed(master: u64, index: u64) -> u64 {
    splitmix64(master ^ index)
}

/// Order-sensitive FNV-1a fingerprint of a float sequence (exact bytes).
/// Used to detect statistics that were centered on stale parameters.
pub fn fingerprint_f64<I: IntoIterator<Item = f64>>(values: I) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for v in values {
        for b in v.to_le_bytes() {
            h ^= b as u64;
            h = h.wrapping_mul(0x0000_0100_0000_01B3);
        }
    }
    h
}
