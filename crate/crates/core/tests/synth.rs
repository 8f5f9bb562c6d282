//! Statistical properties of the synthetic generator.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use statrs::distribution::{ContinuousCDF, StudentsT};

use triplet_core::data::io::read_volume;
use triplet_core::data::synth::{synth_generate, SynthSpec};
use triplet_core::data::{load_samples, Manifest, VolumeSample};

/// Lesion sites of classes 1 and 2 in normalized `[-1, 1]` coordinates
/// (depth, height, width), and the radius averaged over.
const SITES: [[f64; 3]; 2] = [[0.05, 0.45, 0.0], [0.15, -0.55, 0.0]];
const SITE_RADIUS: f64 = 0.2;

fn site_means(s: &VolumeSample) -> [f64; 2] {
    let dims = s.volume.dims;
    let coord = |i: usize, n: usize| 2.0 * i as f64 / (n - 1) as f64 - 1.0;
    SITES.map(|c| {
        let (mut sum, mut count) = (0.0, 0usize);
        for z in 0..dims[0] {
            for y in 0..dims[1] {
                for x in 0..dims[2] {
                    let u = [coord(z, dims[0]), coord(y, dims[1]), coord(x, dims[2])];
                    if (0..3).map(|i| (u[i] - c[i]).powi(2)).sum::<f64>() <= SITE_RADIUS * SITE_RADIUS {
                        sum += s.volume.data[(z * dims[1] + y) * dims[2] + x] as f64;
                        count += 1;
                    }
                }
            }
        }
        sum / count as f64
    })
}

/// Predicts class 0 unless one site is darker than the healthy reference by
/// at least `threshold`, then the darker site's class.
fn classify(f: [f64; 2], healthy: [f64; 2], threshold: f64) -> usize {
    let drops = [healthy[0] - f[0], healthy[1] - f[1]];
    let (site, drop) = if drops[0] >= drops[1] { (0, drops[0]) } else { (1, drops[1]) };
    if drop < threshold {
        0
    } else {
        site + 1
    }
}

fn accuracy(rows: &[([f64; 2], usize)], healthy: [f64; 2], threshold: f64) -> f64 {
    rows.iter().filter(|(f, y)| classify(*f, healthy, threshold) == *y).count() as f64 / rows.len() as f64
}

#[test]
fn two_site_threshold_oracle_separates_classes_after_normalization() {
    let dir = tempfile::tempdir().unwrap();
    let spec = SynthSpec {
        unlabeled_count: 0,
        target_count: 15,
        ..SynthSpec::desk()
    };
    let out = synth_generate(&spec, dir.path(), &mut ChaCha8Rng::seed_from_u64(11)).unwrap();
    let samples = load_samples(&out.task, spec.volume_shape).unwrap();
    assert_eq!(samples.len(), 600);
    let rows: Vec<([f64; 2], usize)> = samples.iter().map(|s| (site_means(s), s.label.unwrap())).collect();
    let (fit, held_out) = rows.split_at(rows.len() / 2);

    let healthy: Vec<_> = fit.iter().filter(|(_, y)| *y == 0).map(|(f, _)| f).collect();
    let reference = [0, 1].map(|i| healthy.iter().map(|f| f[i]).sum::<f64>() / healthy.len() as f64);
    let threshold = (0..=200)
        .map(|i| i as f64 * 0.002)
        .max_by(|a, b| accuracy(fit, reference, *a).total_cmp(&accuracy(fit, reference, *b)))
        .unwrap();
    let acc = accuracy(held_out, reference, threshold);
    assert!(acc > 0.9, "held-out accuracy {acc:.3} (threshold {threshold})");
}

fn subject_means(m: &Manifest) -> Vec<f64> {
    m.records().iter().map(|r| read_volume(&r.path).unwrap().mean()).collect()
}

/// Two-sided Welch test on the means of `a` and `b`.
fn welch_p(a: &[f64], b: &[f64]) -> f64 {
    let moments = |v: &[f64]| {
        let n = v.len() as f64;
        let m = v.iter().sum::<f64>() / n;
        (n, m, v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0))
    };
    let ((na, ma, va), (nb, mb, vb)) = (moments(a), moments(b));
    let se2 = va / na + vb / nb;
    let t = (ma - mb) / se2.sqrt();
    let df = se2 * se2 / ((va / na).powi(2) / (na - 1.0) + (vb / nb).powi(2) / (nb - 1.0));
    2.0 * StudentsT::new(0.0, 1.0, df).unwrap().sf(t.abs())
}

#[test]
fn zero_shift_makes_target_indistinguishable_from_task() {
    let dir = tempfile::tempdir().unwrap();
    let base = SynthSpec {
        unlabeled_count: 0,
        task_count: 150,
        target_count: 150,
        volume_shape: [24; 3],
        ..SynthSpec::desk()
    };
    let p_at = |shift: f64, sub: &str| {
        let spec = SynthSpec { shift, ..base.clone() };
        let out = synth_generate(&spec, &dir.path().join(sub), &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        welch_p(&subject_means(&out.task), &subject_means(&out.target))
    };
    let same = p_at(0.0, "zero");
    assert!(same > 0.01, "shift 0: p = {same:.4}");
    // the same test does detect the default domain gap
    let shifted = p_at(base.shift, "default");
    assert!(shifted < 0.01, "default shift: p = {shifted:.2e}");
}
