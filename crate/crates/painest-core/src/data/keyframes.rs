//! Motion-based key-frame selection: frames are scored by mean absolute
//! difference from their predecessor, the 32 highest-motion frames are kept
//! (stable tie-break toward earlier frames), short clips are topped up
//! uniformly and padded with the final frame, and the result is re-sorted
//! into temporal order.

use crate::data::image::Frame;

pub const KEYFRAMES: usize = 32;

/// Mean absolute per-channel difference between consecutive frames.
/// Output length is frames.len() - 1; scores[i] belongs to frame i+1.
pub fn motion_scores(frames: &[Frame]) -> Vec<f64> {
    frames
        .windows(2)
        .map(|pair| {
            let (a, b) = (&pair[0], &pair[1]);
            debug_assert_eq!(a.data.len(), b.data.len());
            let sum: f64 = a
                .data
                .iter()
                .zip(&b.data)
                .map(|(x, y)| (x - y).abs() as f64)
                .sum();
            sum / a.data.len() as f64
        })
        .collect()
}

/// Choose `k` frame indices out of `n` given the motion scores of frames
/// 1..n. Returns ascending indices, with duplicates only when n < k.
pub fn select_keyframes(n: usize, scores: &[f64], k: usize) -> Vec<usize> {
    assert!(n >= 1, "empty clip");
    assert_eq!(scores.len(), n - 1, "scores must cover frames 1..n");
    let mut ranked: Vec<usize> = (1..n).collect();
    // stable: equal scores keep ascending index order
    ranked.sort_by(|&a, &b| {
        scores[b - 1]
            .partial_cmp(&scores[a - 1])
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.cmp(&b))
    });
    let mut picked: Vec<usize> = ranked.into_iter().take(k).collect();
    if picked.len() < k {
        // uniform fill across the whole clip (frame 0 becomes eligible here)
        let missing = k - picked.len();
        for j in 0..missing {
            let pos = if missing == 1 {
                0.0
            } else {
                j as f64 * (n - 1) as f64 / (missing - 1) as f64
            };
            let idx = pos.round() as usize;
            if !picked.contains(&idx) {
                picked.push(idx);
            }
        }
        // still short: repeat the last frame
        while picked.len() < k {
            picked.push(n - 1);
        }
    }
    picked.sort_unstable();
    picked
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn scores_zero_for_static_clip() {
        let frames = vec![Frame::filled(4, 4, 0.5); 5];
        assert_eq!(motion_scores(&frames), vec![0.0; 4]);
    }

    #[test]
    fn scores_hand_value() {
        let a = Frame::filled(2, 2, 0.25);
        let mut b = Frame::filled(2, 2, 0.25);
        b.data[0] = 0.75; // one channel of one pixel moves by 0.5
        let s = motion_scores(&[a, b]);
        assert_eq!(s.len(), 1);
        assert!((s[0] - 0.5 / 12.0).abs() < 1e-9);
    }

    #[test]
    fn picks_highest_motion_frames() {
        // 40 frames; make frames 5..=36 the high-motion ones.
        let n = 40;
        let scores: Vec<f64> = (1..n).map(|i| if (5..=36).contains(&i) { 1.0 } else { 0.0 }).collect();
        let picked = select_keyframes(n, &scores, 32);
        assert_eq!(picked, (5..=36).collect::<Vec<_>>());
    }

    #[test]
    fn ties_break_toward_earlier_frames() {
        let n = 50;
        let scores = vec![1.0; n - 1];
        let picked = select_keyframes(n, &scores, 32);
        assert_eq!(picked, (1..=32).collect::<Vec<_>>());
    }

    #[test]
    fn short_clip_pads_with_last_frame() {
        let n = 5;
        let scores = vec![0.3, 0.1, 0.4, 0.2];
        let picked = select_keyframes(n, &scores, 8);
        assert_eq!(picked.len(), 8);
        assert!(picked.windows(2).all(|w| w[0] <= w[1]));
        // all real frames present, padding repeats frame 4
        for i in 0..5 {
            assert!(picked.contains(&i));
        }
        assert_eq!(picked.iter().filter(|&&i| i == 4).count(), 4);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn selection_invariants(n in 1usize..200, k in 1usize..64, seed in 0u64..1000) {
            let mut rng = crate::rng::derive_rng(seed, &[crate::rng::tag("kf")]);
            use rand::Rng;
            let scores: Vec<f64> = (1..n).map(|_| rng.gen_range(0.0..1.0)).collect();
            let picked = select_keyframes(n, &scores, k);
            prop_assert_eq!(picked.len(), k);
            prop_assert!(picked.windows(2).all(|w| w[0] <= w[1]));
            prop_assert!(picked.iter().all(|&i| i < n));
            if n > k {
                // no duplicates when enough frames exist
                prop_assert!(picked.windows(2).all(|w| w[0] < w[1]));
            }
        }
    }
}
