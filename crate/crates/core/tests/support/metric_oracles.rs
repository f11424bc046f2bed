use rand::Rng;
use rand_chacha::ChaCha8Rng;

/// Pair counts by looking at every pair: (together in both, apart in both,
/// together in truth, together in prediction).
pub fn brute_pairs(a: &[usize], b: &[usize]) -> (u128, u128, u128, u128) {
    let (mut both, mut neither, mut ta, mut tb) = (0, 0, 0, 0);
    for i in 0..a.len() {
        for j in i + 1..a.len() {
            let (sa, sb) = (a[i] == a[j], b[i] == b[j]);
            both += u128::from(sa && sb);
            neither += u128::from(!sa && !sb);
            ta += u128::from(sa);
            tb += u128::from(sb);
        }
    }
    (both, neither, ta, tb)
}

/// Hubert-Arabie pair-counting form of the adjusted Rand index.
pub fn brute_ari(a: &[usize], b: &[usize]) -> f64 {
    ari_from_pairs(brute_pairs(a, b))
}

/// Adjusted Rand index from the four counts of [`brute_pairs`].
pub fn ari_from_pairs((both, neither, ta, tb): (u128, u128, u128, u128)) -> f64 {
    let only_a = (ta - both) as f64;
    let only_b = (tb - both) as f64;
    let (s, d) = (both as f64, neither as f64);
    let den = (s + only_a) * (only_a + d) + (s + only_b) * (only_b + d);
    if den == 0.0 {
        return 1.0;
    }
    2.0 * (s * d - only_a * only_b) / den
}

/// Restricted growth strings: every set partition of `n` items once.
pub fn set_partitions(n: usize) -> Vec<Vec<usize>> {
    let mut out = Vec::new();
    let mut cur = vec![0usize; n];
    fn rec(i: usize, max: usize, cur: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
        if i == cur.len() {
            out.push(cur.clone());
            return;
        }
        for v in 0..=max + 1 {
            cur[i] = v;
            rec(i + 1, max.max(v), cur, out);
        }
    }
    if n > 0 {
        rec(1, 0, &mut cur, &mut out);
    }
    out
}

pub fn random_labels(rng: &mut ChaCha8Rng, n: usize) -> Vec<usize> {
    let k = rng.random_range(1..=n.min(8));
    (0..n).map(|_| rng.random_range(0..k) * 7 + 3).collect()
}

/// Entropies and mutual information straight from sample frequencies.
pub fn brute_nmi(a: &[usize], b: &[usize]) -> f64 {
    let n = a.len() as f64;
    let freq = |pred: &dyn Fn(usize) -> bool| (0..a.len()).filter(|&i| pred(i)).count() as f64 / n;
    let ids = |v: &[usize]| {
        let mut u = v.to_vec();
        u.sort();
        u.dedup();
        u
    };
    let (ua, ub) = (ids(a), ids(b));
    let h = |u: &[usize], v: &[usize]| -> f64 {
        u.iter()
            .map(|&x| {
                let q = freq(&|i| v[i] == x);
                -q * q.ln()
            })
            .sum()
    };
    let (ha, hb) = (h(&ua, a), h(&ub, b));
    let mut mi = 0.0;
    for &x in &ua {
        for &y in &ub {
            let pxy = freq(&|i| a[i] == x && b[i] == y);
            if pxy > 0.0 {
                mi += pxy * (pxy / (freq(&|i| a[i] == x) * freq(&|i| b[i] == y))).ln();
            }
        }
    }
    mi / (ha * hb).sqrt()
}

/// NMI from joint and marginal label frequencies, with the degenerate
/// conventions: two single-cluster partitions score 1, one scores 0.
pub fn frequency_nmi(a: &[usize], b: &[usize]) -> f64 {
    let n = a.len() as f64;
    let ka = a.iter().max().map_or(0, |m| m + 1);
    let kb = b.iter().max().map_or(0, |m| m + 1);
    let mut joint = vec![0usize; ka * kb];
    let (mut ma, mut mb) = (vec![0usize; ka], vec![0usize; kb]);
    for (&x, &y) in a.iter().zip(b) {
        joint[x * kb + y] += 1;
        ma[x] += 1;
        mb[y] += 1;
    }
    let h = |m: &[usize]| -> f64 { m.iter().filter(|&&c| c > 0).map(|&c| c as f64 / n).map(|q| -q * q.ln()).sum() };
    let (ha, hb) = (h(&ma), h(&mb));
    if ha == 0.0 || hb == 0.0 {
        return if ha == hb { 1.0 } else { 0.0 };
    }
    let mut mi = 0.0;
    for x in 0..ka {
        for y in 0..kb {
            let c = joint[x * kb + y];
            if c > 0 {
                let pxy = c as f64 / n;
                mi += pxy * (pxy / ((ma[x] as f64 / n) * (mb[y] as f64 / n))).ln();
            }
        }
    }
    (mi / (ha * hb).sqrt()).clamp(0.0, 1.0)
}
