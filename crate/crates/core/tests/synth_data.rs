use cvqd_core::metrics::{srcc, ScorePairs};
use cvqd_core::model_zoo::VideoClip;
use cvqd_core::synth_data::{
    apply_distortion, build_dataset, generate_pristine, manifest, mos_proxy, pristine_crops,
    train_contents, CodecSim, DataConfig, DatasetSplit, DistortionRecipe, Pattern,
    PristineClipSpec,
};
use ndarray::s;
use proptest::prelude::*;

fn mse(a: &VideoClip, b: &VideoClip) -> f64 {
    (a.data() - b.data()).mapv(|v| v * v).mean().unwrap()
}

/// Clip statistics the distortions move: log spatial detail energy, log
/// frame-difference energy, fraction of repeated frames, and log 8-pixel
/// column periodicity of horizontal gradients.
fn stats(clip: &VideoClip) -> [f64; 4] {
    let d = clip.data();
    let (t, _, h, w) = d.dim();
    let dx = &d.slice(s![.., .., .., 1..]) - &d.slice(s![.., .., .., ..w - 1]);
    let dy = &d.slice(s![.., .., 1.., ..]) - &d.slice(s![.., .., ..h - 1, ..]);
    let detail = dx.mapv(|v| v * v).mean().unwrap() + dy.mapv(|v| v * v).mean().unwrap();
    let mut motion = 0.0;
    let mut repeats = 0.0;
    for f in 1..t {
        let e = (&d.slice(s![f, .., .., ..]) - &d.slice(s![f - 1, .., .., ..]))
            .mapv(|v| v * v)
            .mean()
            .unwrap();
        motion += e / (t - 1) as f64;
        repeats += f64::from(u8::from(e == 0.0)) / (t - 1) as f64;
    }
    let mut column = [0.0f64; 8];
    for ((_, _, _, x), v) in dx.indexed_iter() {
        column[x % 8] += v * v;
    }
    let peak = column.iter().copied().fold(0.0, f64::max);
    let rest = (column.iter().sum::<f64>() - peak) / 7.0;
    let floor = 1e-12;
    [
        (detail + floor).ln(),
        (motion + floor).ln(),
        repeats,
        ((peak + floor) / (rest + floor)).ln(),
    ]
}

#[test]
fn a_trivial_predictor_ranks_test_clips() {
    // Score = minus the squared distance between a clip's statistics and the
    // mean statistics of the pristine training crops.
    let config = DataConfig::default();
    let data = build_dataset(&config).unwrap();
    let pristine = pristine_crops(&config, &train_contents(&config).unwrap()).unwrap();
    let mut mean = [0.0; 4];
    for c in &pristine {
        for (m, v) in mean.iter_mut().zip(stats(c)) {
            *m += v / pristine.len() as f64;
        }
    }
    let predicted: Vec<f64> = data
        .test
        .iter()
        .map(|c| {
            -stats(&c.clip)
                .iter()
                .zip(&mean)
                .map(|(v, m)| (v - m) * (v - m))
                .sum::<f64>()
        })
        .collect();
    let actual = data.test.iter().map(|c| c.mos).collect();
    let r = srcc(&ScorePairs::new(predicted, actual).unwrap()).unwrap();
    assert!(r > 0.5, "trivial predictor test srcc {r}");
}

#[test]
fn deviation_grows_with_strength_for_every_family() {
    let spec = PristineClipSpec {
        content_id: 3,
        pattern: Pattern::TexturedNoiseField,
        frames: 8,
        height: 32,
        width: 32,
        motion_px_per_frame: 1.5,
    };
    let clip = generate_pristine(&spec, 5);
    for family in CodecSim::ALL {
        let mut last = 0.0;
        for k in 0..=9 {
            let recipe = DistortionRecipe::new(family, k as f64 / 9.0);
            let e = mse(&apply_distortion(&clip, &recipe).unwrap(), &clip);
            if k == 0 {
                assert_eq!(e, 0.0, "{family:?} at strength 0 is not the identity");
            }
            assert!(e >= last, "{family:?}: mse {e} after {last} at step {k}");
            last = e;
        }
        assert!(last > 0.0);
    }
}

#[test]
fn dataset_is_a_pure_function_of_its_config() {
    let config = DataConfig {
        num_contents: 6,
        seed: 9,
        ..DataConfig::default()
    };
    let a = build_dataset(&config).unwrap();
    assert_eq!(a, build_dataset(&config).unwrap());
    assert_eq!(manifest(&config).unwrap(), manifest(&config).unwrap());
    assert!(DatasetSplit::content_ids(&a.train).is_disjoint(&DatasetSplit::content_ids(&a.test)));
    let other = build_dataset(&DataConfig { seed: 10, ..config }).unwrap();
    assert_ne!(a.train[0].clip, other.train[0].clip);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn mos_falls_strictly_with_strength(a in 0.0f64..=1.0, b in 0.0f64..=1.0, f in 0usize..3) {
        prop_assume!(a != b);
        let family = CodecSim::ALL[f];
        let (lo, hi) = if a < b { (a, b) } else { (b, a) };
        let m_lo = mos_proxy(&DistortionRecipe::new(family, lo));
        let m_hi = mos_proxy(&DistortionRecipe::new(family, hi));
        prop_assert!(m_hi < m_lo);
        prop_assert!((0.0..=1.0).contains(&m_hi) && (0.0..=1.0).contains(&m_lo));
    }

    #[test]
    fn splits_never_share_content(n in 2usize..40, frac in 0.05f64..0.95, seed in any::<u64>()) {
        let config = DataConfig { num_contents: n, train_fraction: frac, seed, ..DataConfig::default() };
        if let Ok(train) = train_contents(&config) {
            let records = manifest(&config).unwrap();
            prop_assert!(!train.is_empty() && train.len() < n);
            for r in records {
                prop_assert_eq!(train.contains(&r.content_id), r.split == cvqd_core::synth_data::Split::Train);
            }
        }
    }
}
