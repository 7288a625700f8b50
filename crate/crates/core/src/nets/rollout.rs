use crate::autodiff::AttentionProbs;

/// Approximate attention flow by rollout for sequence `b` of a batch: each
/// layer's head-averaged attention is mixed with the identity (residual
/// path), row-normalized, and the layers are multiplied bottom-up. Returns
/// the last (masked) row's mass over the preceding rows, renormalized to sum
/// to one.
pub fn rollout_masked_row(maps: &[AttentionProbs], b: usize) -> Vec<f64> {
    let Some(first) = maps.first() else { return Vec::new() };
    let t = first.seq;
    let mut rollout: Vec<f64> = (0..t * t).map(|k| if k / t == k % t { 1.0 } else { 0.0 }).collect();
    for m in maps {
        assert!(b < m.batch, "sequence {b} out of range");
        let mut a = vec![0.0; t * t];
        for i in 0..t {
            let mut row_sum = 0.0;
            for j in 0..t {
                let mut avg = 0.0;
                for h in 0..m.heads {
                    avg += m.get(b, h, i, j);
                }
                avg /= m.heads as f64;
                let v = avg + if i == j { 1.0 } else { 0.0 };
                a[i * t + j] = v;
                row_sum += v;
            }
            for j in 0..t {
                a[i * t + j] /= row_sum;
            }
        }
        // rollout <- a @ rollout
        let mut next = vec![0.0; t * t];
        for i in 0..t {
            for k in 0..t {
                let aik = a[i * t + k];
                if aik == 0.0 {
                    continue;
                }
                for j in 0..t {
                    next[i * t + j] += aik * rollout[k * t + j];
                }
            }
        }
        rollout = next;
    }
    let last = &rollout[(t - 1) * t..(t - 1) * t + t - 1];
    let total: f64 = last.iter().sum();
    if total <= 0.0 {
        return vec![1.0 / (t - 1) as f64; t - 1];
    }
    last.iter().map(|v| v / total).collect()
}
