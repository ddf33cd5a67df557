//! The default synthetic classes must be separable by a trivial classifier,
//! so that the training targets measure the network rather than the data.

use star_core::pipeline::{cross_subject_split, VideoSample};
use star_core::synth::{generate_dataset, SynthConfig};

/// Mean heatmap-weighted `(x, y)` of every keypoint over the whole clip.
fn mean_positions(s: &VideoSample) -> Vec<f64> {
    let shape = s.clip.shape();
    let mut out = Vec::with_capacity(2 * shape.c);
    for c in 0..shape.c {
        let (mut mass, mut sx, mut sy) = (0.0, 0.0, 0.0);
        for t in 0..shape.t {
            let frame = s.clip.frame(c, t);
            for y in 0..shape.h {
                for x in 0..shape.w {
                    let v = frame[y * shape.w + x] as f64;
                    mass += v;
                    sx += v * x as f64;
                    sy += v * y as f64;
                }
            }
        }
        out.push(sx / mass);
        out.push(sy / mass);
    }
    out
}

#[test]
fn nearest_centroid_separates_default_classes() {
    let cfg = SynthConfig::default();
    let k = cfg.actions.len();
    let (train, test) = cross_subject_split(generate_dataset(&cfg).unwrap()).unwrap();

    let dim = 2 * train[0].clip.shape().c;
    let mut centroids = vec![vec![0.0; dim]; k];
    let mut counts = vec![0usize; k];
    for s in &train {
        let f = mean_positions(s);
        let a = s.action as usize;
        counts[a] += 1;
        for (c, v) in centroids[a].iter_mut().zip(&f) {
            *c += v;
        }
    }
    for (c, &n) in centroids.iter_mut().zip(&counts) {
        assert!(n > 0);
        c.iter_mut().for_each(|v| *v /= n as f64);
    }

    let correct = test
        .iter()
        .filter(|s| {
            let f = mean_positions(s);
            let dist = |c: &Vec<f64>| c.iter().zip(&f).map(|(a, b)| (a - b) * (a - b)).sum::<f64>();
            let best = (0..k).min_by(|&a, &b| dist(&centroids[a]).total_cmp(&dist(&centroids[b]))).unwrap();
            best == s.action as usize
        })
        .count();
    let accuracy = correct as f64 / test.len() as f64;
    assert!(accuracy >= 0.8, "nearest-centroid held-out accuracy {accuracy}");
}
