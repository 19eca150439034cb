use super::*;
use crate::superpoint::{inverse_map, superpoint_pool};
use rand::Rng;

fn small_config(c: usize) -> ModelConfig {
    ModelConfig {
        channels: c,
        ..ModelConfig::default()
    }
}

fn identity(c: usize) -> Tensor {
    let mut t = Tensor::zeros(vec![c, c]);
    for i in 0..c {
        t.data_mut()[i * c + i] = 1.0;
    }
    t
}

fn set(params: &mut ModelParams, name: &str, t: Tensor) {
    *params.get_mut(name).unwrap() = t;
}

fn random_matrix(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Vec<f64> {
    (0..r * c).map(|_| rng.gen_range(-1.0..1.0)).collect()
}

fn run_extractor(params: &ModelParams, input: Vec<f64>) -> Vec<f64> {
    let mut g = Graph::new();
    let vars = ParamVars::bind(&mut g, params, false);
    let n = input.len() / INPUT_CHANNELS;
    let x = g.constant(Tensor::matrix(n, INPUT_CHANNELS, input).unwrap());
    let f = extract_features(&mut g, x, &vars).unwrap();
    g.value(f).data().to_vec()
}

#[test]
fn identical_rows_give_identical_features() {
    let params = ModelParams::init(ModelConfig::default(), 1).unwrap();
    let row: Vec<f64> = (0..9).map(|i| i as f64 * 0.1).collect();
    let input = [row.clone(), row].concat();
    let f = run_extractor(&params, input);
    assert_eq!(f[..32], f[32..]);
}

#[test]
fn zero_weights_give_zero_features() {
    let mut params = ModelParams::init(ModelConfig::default(), 1).unwrap();
    for (_, t) in params.iter_mut() {
        t.data_mut().iter_mut().for_each(|x| *x = 0.0);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let f = run_extractor(&params, random_matrix(&mut rng, 5, 9));
    assert!(f.iter().all(|&x| x == 0.0));
}

#[test]
fn extractor_matches_matrix_chain() {
    let params = ModelParams::init(ModelConfig::default(), 3).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let input = random_matrix(&mut rng, 16, 9);
    let got = run_extractor(&params, input.clone());
    let mut h = input;
    let mut width = 9;
    for l in 0..3 {
        let w = params.get(&format!("extractor.{l}.weight")).unwrap().data();
        let b = params.get(&format!("extractor.{l}.bias")).unwrap().data();
        let mut next = vec![0.0; 16 * 32];
        for i in 0..16 {
            for j in 0..32 {
                let mut s = b[j];
                for k in 0..width {
                    s += h[i * width + k] * w[k * 32 + j];
                }
                next[i * 32 + j] = s.max(0.0);
            }
        }
        h = next;
        width = 32;
    }
    for (a, b) in got.iter().zip(&h) {
        assert!((a - b).abs() <= 1e-12);
    }
}

fn attention(params: &ModelParams, u: Tensor, f: Tensor) -> Vec<f64> {
    let mut g = Graph::new();
    let vars = ParamVars::bind(&mut g, params, false);
    let u = g.constant(u);
    let f = g.constant(f);
    let o = cross_attention(&mut g, u, f, &vars).unwrap();
    g.value(o).data().to_vec()
}

fn identity_attention(c: usize) -> ModelParams {
    let mut p = ModelParams::init(small_config(c), 0).unwrap();
    for n in ["attn.wq", "attn.wk", "attn.wv", "attn.wo"] {
        set(&mut p, n, identity(c));
    }
    p
}

#[test]
fn attention_over_one_key_returns_its_value() {
    let p = identity_attention(3);
    let f = Tensor::matrix(1, 3, vec![0.3, -1.0, 2.0]).unwrap();
    let u = Tensor::matrix(1, 3, vec![5.0, 1.0, 0.0]).unwrap();
    assert_eq!(attention(&p, u, f.clone()), f.data());
}

#[test]
fn attention_splits_evenly_between_equal_scores() {
    let p = identity_attention(2);
    let f = Tensor::matrix(2, 2, vec![1.0, 0.0, 0.0, 1.0]).unwrap();
    let u = Tensor::matrix(1, 2, vec![0.5, 0.5]).unwrap();
    let out = attention(&p, u, f);
    assert!((out[0] - 0.5).abs() < 1e-15 && (out[1] - 0.5).abs() < 1e-15);
}

fn literal_attention(params: &ModelParams, u: &[f64], f: &[f64], m: usize, n: usize, c: usize) -> Vec<f64> {
    let mat = |a: &[f64], r: usize, w: &[f64]| -> Vec<f64> {
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[i * c + j] = (0..c).map(|k| a[i * c + k] * w[k * c + j]).sum();
            }
        }
        out
    };
    let w = |n: &str| params.get(n).unwrap().data().to_vec();
    let q = mat(u, m, &w("attn.wq"));
    let k = mat(f, n, &w("attn.wk"));
    let v = mat(f, n, &w("attn.wv"));
    let mut av = vec![0.0; m * c];
    for i in 0..m {
        let scores: Vec<f64> = (0..n)
            .map(|j| (0..c).map(|t| q[i * c + t] * k[j * c + t]).sum::<f64>() / (c as f64).sqrt())
            .collect();
        let mx = scores.iter().cloned().fold(f64::MIN, f64::max);
        let e: Vec<f64> = scores.iter().map(|s| (s - mx).exp()).collect();
        let z: f64 = e.iter().sum();
        for j in 0..n {
            for t in 0..c {
                av[i * c + t] += e[j] / z * v[j * c + t];
            }
        }
    }
    mat(&av, m, &w("attn.wo"))
}

#[test]
fn attention_matches_literal_formula() {
    let (m, n, c) = (4, 9, 6);
    let params = ModelParams::init(small_config(c), 11).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let u = random_matrix(&mut rng, m, c);
    let f = random_matrix(&mut rng, n, c);
    let got = attention(
        &params,
        Tensor::matrix(m, c, u.clone()).unwrap(),
        Tensor::matrix(n, c, f.clone()).unwrap(),
    );
    let want = literal_attention(&params, &u, &f, m, n, c);
    for (a, b) in got.iter().zip(&want) {
        assert!((a - b).abs() <= 1e-12, "{a} vs {b}");
    }
}

fn enhance(params: &ModelParams, f: Tensor, part: &SuperpointPartition) -> (Vec<f64>, Vec<f64>) {
    let mut g = Graph::new();
    let vars = ParamVars::bind(&mut g, params, false);
    let fv = g.constant(f);
    let e = geometry_enhance(&mut g, fv, part, &vars).unwrap();
    (g.value(e.enhanced).data().to_vec(), g.value(e.attended).data().to_vec())
}

#[test]
fn zero_output_projection_is_identity() {
    let c = 5;
    let mut params = ModelParams::init(small_config(c), 5).unwrap();
    set(&mut params, "attn.wo", Tensor::zeros(vec![c, c]));
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let f = random_matrix(&mut rng, 12, c);
    let part = SuperpointPartition::from_ids(vec![0, 0, 1, 2, 1, 0, 3, 3, 2, 1, 0, 3]).unwrap();
    let (gv, _) = enhance(&params, Tensor::matrix(12, c, f.clone()).unwrap(), &part);
    assert_eq!(gv, f);
}

#[test]
fn single_point_enhancement_doubles_features() {
    let p = identity_attention(4);
    let f = Tensor::matrix(1, 4, vec![1.0, -2.0, 0.5, 3.0]).unwrap();
    let (gv, _) = enhance(&p, f.clone(), &SuperpointPartition::singletons(1));
    let doubled: Vec<f64> = f.data().iter().map(|x| 2.0 * x).collect();
    assert_eq!(gv, doubled);
}

#[test]
fn enhancement_residual_is_inverse_mapped_attention() {
    let c = 6;
    let params = ModelParams::init(small_config(c), 7).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let n = 40;
    let f = random_matrix(&mut rng, n, c);
    let ids: Vec<u32> = (0..n).map(|i| (i % 7) as u32).collect();
    let part = SuperpointPartition::from_ids(ids).unwrap();
    let (gv, attended) = enhance(&params, Tensor::matrix(n, c, f.clone()).unwrap(), &part);
    let inv = inverse_map(&attended, c, &part).unwrap();
    for i in 0..n * c {
        assert_eq!(gv[i], inv[i] + f[i]);
    }
    let pooled = superpoint_pool(&f, c, &part).unwrap();
    assert_eq!(pooled.len(), 7 * c);
}

fn toy_cloud(n: usize, seed: u64) -> PointCloud {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let pos = (0..n)
        .map(|_| [rng.gen_range(0.0..4.0), rng.gen_range(0.0..3.0), rng.gen_range(0.0..1.0)])
        .collect();
    let col = (0..n).map(|_| [rng.gen(), rng.gen(), rng.gen()]).collect();
    let mask = (0..n).map(|_| rng.gen_range(0..2u8)).collect();
    PointCloud::new(pos, Some(col)).unwrap().with_mask(mask).unwrap()
}

#[test]
fn equal_logit_columns_give_half_saliency() {
    let mut params = ModelParams::init(ModelConfig::default(), 9).unwrap();
    set(&mut params, "head.weight", Tensor::zeros(vec![32, 2]));
    set(&mut params, "head.bias", Tensor::matrix(1, 2, vec![0.7, 0.7]).unwrap());
    let s = predict(&toy_cloud(200, 1), &params, 0).unwrap();
    assert!(s.iter().all(|&x| x == 0.5));
}

#[test]
fn single_point_cloud_runs() {
    let params = ModelParams::init(ModelConfig::default(), 9).unwrap();
    let cloud = PointCloud::new(vec![[1.0, 2.0, 3.0]], None).unwrap();
    let t = forward(&cloud, &params, ForwardOptions::default()).unwrap().trace;
    assert_eq!(t.partition.as_ref().unwrap().len(), 1);
    assert_eq!(t.saliency.len(), 1);
}

#[test]
fn saliency_is_a_probability_and_deterministic() {
    let params = ModelParams::init(ModelConfig::default(), 10).unwrap();
    let cloud = toy_cloud(500, 2);
    let pass = forward(&cloud, &params, ForwardOptions { seed: 4, ..Default::default() }).unwrap();
    let t = &pass.trace;
    let logits = pass.graph.value(t.logits).data();
    for (i, &s) in t.saliency.iter().enumerate() {
        assert!((0.0..=1.0).contains(&s));
        let bg = foreground_probability(&[logits[2 * i + 1], logits[2 * i]])[0];
        assert!((s + bg - 1.0).abs() <= 1e-12);
    }
    let again = predict(&cloud, &params, 4).unwrap();
    assert_eq!(again, t.saliency);
}

#[test]
fn baseline_never_partitions() {
    let config = ModelConfig {
        enhancement: Enhancement::None,
        ..ModelConfig::default()
    };
    let params = ModelParams::init(config, 1).unwrap();
    let before = superpoint::partition_calls();
    let t = forward(&toy_cloud(300, 3), &params, ForwardOptions::default()).unwrap().trace;
    assert_eq!(superpoint::partition_calls(), before);
    assert!(t.partition.is_none() && t.pooled.is_none());
}

#[test]
fn checkpoint_round_trip_is_bit_exact() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.bin");
    let config = ModelConfig {
        gamma: Gamma::Fixed(0.123456789),
        enhancement: Enhancement::PoolOnly,
        feature_mode: FeatureMode::XyzOnly,
        coord_scale: 0.1 + 0.2,
        voxel_shape: [10, 20, 30],
        ..ModelConfig::default()
    };
    let params = ModelParams::init(config, 42).unwrap();
    params.save(&path).unwrap();
    let loaded = ModelParams::load(&path).unwrap();
    assert_eq!(loaded, params);
    let cloud = toy_cloud(300, 5);
    assert_eq!(predict(&cloud, &loaded, 1).unwrap(), predict(&cloud, &params, 1).unwrap());
}

#[test]
fn truncated_checkpoint_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.bin");
    ModelParams::init(ModelConfig::default(), 1).unwrap().save(&path).unwrap();
    let bytes = std::fs::read(&path).unwrap();
    std::fs::write(&path, &bytes[..bytes.len() - 8]).unwrap();
    let err = ModelParams::load(&path).unwrap_err().to_string();
    assert!(err.contains("head.bias"), "{err}");
}

#[test]
fn wrong_input_width_is_a_shape_error() {
    let params = ModelParams::init(ModelConfig::default(), 1).unwrap();
    let mut g = Graph::new();
    let vars = ParamVars::bind(&mut g, &params, false);
    let x = g.constant(Tensor::zeros(vec![3, 6]));
    assert!(matches!(extract_features(&mut g, x, &vars), Err(Error::Shape { .. })));
}

#[test]
fn model_input_scales_only_raw_coordinates() {
    let cloud = toy_cloud(50, 3);
    let cfg = ModelConfig {
        coord_scale: 0.25,
        ..ModelConfig::default()
    };
    let raw = build_input_features_with(&cloud, cfg.feature_mode);
    let scaled = model_input(&cloud, &cfg).unwrap();
    for (r, s) in raw.values().chunks(INPUT_CHANNELS).zip(scaled.data().chunks(INPUT_CHANNELS)) {
        for a in 0..3 {
            assert_eq!(s[a], r[a] * 0.25);
        }
        assert_eq!(&s[3..], &r[3..]);
    }
}

#[test]
fn non_positive_coord_scale_is_rejected() {
    for bad in [0.0, -1.0, f64::NAN, f64::INFINITY] {
        let cfg = ModelConfig {
            coord_scale: bad,
            ..ModelConfig::default()
        };
        assert!(cfg.validate().is_err(), "{bad}");
    }
}
