use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::numcore::grad_check;

const H: usize = 4;
const K: usize = 3;

fn small_config() -> FusionConfig {
    let mut c = FusionConfig::new(
        ModalityValues {
            visual: 3,
            text: 2,
            audio: 2,
        },
        K,
        H,
    );
    c.proj_dim = 3;
    c
}

fn model(seed: u64) -> FusionModel {
    FusionModel::init(small_config(), seed).unwrap()
}

fn p(m: &FusionModel, name: &str) -> Vec<Vec<f64>> {
    let t = &m.params().by_name(name).unwrap().value;
    (0..t.rows()).map(|i| t.row_slice(i).to_vec()).collect()
}

// x (1 x r) times w (r x c)
fn vecmat(x: &[f64], w: &[Vec<f64>]) -> Vec<f64> {
    let cols = w[0].len();
    (0..cols)
        .map(|j| x.iter().zip(w).map(|(a, row)| a * row[j]).sum())
        .collect()
}

fn add(a: &[f64], b: &[f64]) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| x + y).collect()
}

fn sub(a: &[f64], b: &[f64]) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| x - y).collect()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn softmax(x: &[f64]) -> Vec<f64> {
    let m = x.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = x.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.iter().map(|v| v / s).collect()
}

fn attend(q: &[f64], keys: &[Vec<f64>], vals: &[Vec<f64>]) -> Vec<f64> {
    let scores: Vec<f64> = keys.iter().map(|k| dot(q, k) / (H as f64).sqrt()).collect();
    let a = softmax(&scores);
    let mut out = vec![0.0; vals[0].len()];
    for (w, v) in a.iter().zip(vals) {
        for (o, x) in out.iter_mut().zip(v) {
            *o += w * x;
        }
    }
    out
}

fn mlp(m: &FusionModel, prefix: &str, x: &[f64]) -> Vec<f64> {
    let h: Vec<f64> = add(
        &vecmat(x, &p(m, &format!("{prefix}.w1"))),
        &p(m, &format!("{prefix}.b1"))[0],
    )
    .iter()
    .map(|v| v.tanh())
    .collect();
    add(
        &vecmat(&h, &p(m, &format!("{prefix}.w2"))),
        &p(m, &format!("{prefix}.b2"))[0],
    )
}

fn encode_oracle(m: &FusionModel, feats: &[Vec<f64>], modality: &str) -> Vec<Vec<f64>> {
    let x: Vec<Vec<f64>> = feats
        .iter()
        .map(|f| {
            add(
                &vecmat(f, &p(m, &format!("enc.{modality}.w_in"))),
                &p(m, &format!("enc.{modality}.b_in"))[0],
            )
        })
        .collect();
    let q: Vec<_> = x
        .iter()
        .map(|r| vecmat(r, &p(m, &format!("enc.{modality}.wq"))))
        .collect();
    let k: Vec<_> = x
        .iter()
        .map(|r| vecmat(r, &p(m, &format!("enc.{modality}.wk"))))
        .collect();
    let v: Vec<_> = x
        .iter()
        .map(|r| vecmat(r, &p(m, &format!("enc.{modality}.wv"))))
        .collect();
    (0..x.len())
        .map(|i| add(&x[i], &attend(&q[i], &k[..=i], &v[..=i])))
        .collect()
}

fn retrieve_oracle(m: &FusionModel, hv: &[f64], hm: &[Vec<f64>], modality: &str) -> Vec<f64> {
    let q = vecmat(hv, &p(m, &format!("cross.{modality}.wq")));
    let k: Vec<_> = hm
        .iter()
        .map(|r| vecmat(r, &p(m, &format!("cross.{modality}.wk"))))
        .collect();
    let v: Vec<_> = hm
        .iter()
        .map(|r| vecmat(r, &p(m, &format!("cross.{modality}.wv"))))
        .collect();
    attend(&q, &k, &v)
}

fn random_vecs(rng: &mut ChaCha8Rng, n: usize, d: usize) -> Vec<Vec<f64>> {
    (0..n)
        .map(|_| (0..d).map(|_| rng.random_range(-1.0..1.0)).collect())
        .collect()
}

fn conversation(rng: &mut ChaCha8Rng, id: &str, n: usize) -> ConversationFeatures {
    ConversationFeatures {
        conv_id: id.into(),
        visual: random_vecs(rng, n, 3),
        text: random_vecs(rng, n, 2),
        audio: random_vecs(rng, n, 2),
        labels: (0..n).map(|i| Some(i % K)).collect(),
        corrupted: vec![false; n],
    }
}

fn close(a: &[f64], b: &[f64], tol: f64) -> bool {
    a.len() == b.len() && a.iter().zip(b).all(|(x, y)| (x - y).abs() <= tol)
}

#[test]
fn encoder_matches_two_step_oracle() {
    let m = model(1);
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let feats = random_vecs(&mut rng, 2, 3);
    let got = m.encode_context(&feats, Modality::Visual).unwrap();
    let want = encode_oracle(&m, &feats, "visual");
    for (g, w) in got.iter().zip(&want) {
        assert!(close(g, w, 1e-12), "{g:?} vs {w:?}");
    }
    // length one: function of the first feature only
    let one = m.encode_context(&feats[..1], Modality::Visual).unwrap();
    assert_eq!(one[0], got[0]);
    assert!(m.encode_context(&[], Modality::Visual).is_err());
}

#[test]
fn retrieval_matches_brute_force_and_weights_sum_to_one() {
    let m = model(2);
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let hv = random_vecs(&mut rng, 1, H).remove(0);
    let hm = random_vecs(&mut rng, 3, H);
    let (got, w) = m.retrieve_reference(&hv, &hm, Modality::Text).unwrap();
    assert!(close(&got, &retrieve_oracle(&m, &hv, &hm, "text"), 1e-12));
    assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    assert!(w.iter().all(|&x| x >= 0.0));

    // singleton: value projection regardless of query
    let (single, _) = m.retrieve_reference(&hv, &hm[..1], Modality::Audio).unwrap();
    let v0 = vecmat(&hm[0], &p(&m, "cross.audio.wv"));
    assert!(close(&single, &v0, 1e-12));

    // identical keys: the shared value row
    let same = vec![hm[1].clone(); 4];
    let (r, _) = m.retrieve_reference(&hv, &same, Modality::Text).unwrap();
    assert!(close(&r, &vecmat(&hm[1], &p(&m, "cross.text.wv")), 1e-12));

    assert!(m.retrieve_reference(&hv, &[], Modality::Text).is_err());
    assert!(m.retrieve_reference(&hv, &hm, Modality::Visual).is_err());
}

#[test]
fn residual_complement_cases() {
    let mut m = model(3);
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let v = random_vecs(&mut rng, 3, H);
    let got = m.residual_complement(&v[0], &v[1], &v[2]).unwrap();
    let input = [sub(&v[1], &v[0]), sub(&v[2], &v[0])].concat();
    assert!(close(&got, &mlp(&m, "delta", &input), 1e-12));

    // equal references give the bias-only response
    let at_zero = m.residual_complement(&v[0], &v[0], &v[0]).unwrap();
    assert!(close(&at_zero, &mlp(&m, "delta", &[0.0; 2 * H]), 0.0));

    for name in ["delta.w1", "delta.b1", "delta.w2", "delta.b2"] {
        let id = m.params().id(name).unwrap();
        m.params_mut().get_mut(id).value.data_mut().fill(0.0);
    }
    assert!(m
        .residual_complement(&v[0], &v[1], &v[2])
        .unwrap()
        .iter()
        .all(|&x| x == 0.0));
    assert!(m.residual_complement(&v[0][..2], &v[1], &v[2]).is_err());
}

#[test]
fn reliability_is_max_softmax() {
    let mut m = model(4);
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let hv = random_vecs(&mut rng, 1, H).remove(0);
    let (c, aux) = m.compute_reliability(&hv).unwrap();
    let want = add(&vecmat(&hv, &p(&m, "aux.w")), &p(&m, "aux.b")[0]);
    assert!(close(&aux, &want, 1e-12));
    let mx = softmax(&want).into_iter().fold(0.0, f64::max);
    assert!((c - mx).abs() < 1e-15);

    // uniform logits give 1/K
    let id = m.params().id("aux.w").unwrap();
    m.params_mut().get_mut(id).value.data_mut().fill(0.0);
    let id = m.params().id("aux.b").unwrap();
    m.params_mut().get_mut(id).value.data_mut().fill(0.0);
    let (c, _) = m.compute_reliability(&hv).unwrap();
    assert!((c - 1.0 / K as f64).abs() < 1e-15);

    // saturation
    m.params_mut().get_mut(id).value.data_mut()[1] = 50.0;
    let (c, _) = m.compute_reliability(&hv).unwrap();
    assert!(c > 1.0 - 1e-6);
}

#[test]
fn complement_examples() {
    assert_eq!(
        complement_visual(&[1.0, 1.0], &[2.0, -2.0], 0.5).unwrap(),
        vec![2.0, 0.0]
    );
    assert!(complement_visual(&[1.0], &[1.0], 1.5).is_err());
    assert!(complement_visual(&[1.0], &[1.0], -0.1).is_err());
    assert!(complement_visual(&[1.0], &[1.0, 2.0], 0.5).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]

    #[test]
    fn gate_identities_are_exact(
        h in prop::collection::vec(-1e6f64..1e6, 1..16),
        seed in any::<u64>(),
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d: Vec<f64> = h.iter().map(|_| rng.random_range(-1e6..1e6)).collect();
        prop_assert_eq!(complement_visual(&h, &d, 1.0).unwrap(), h.clone());
        let sum: Vec<f64> = h.iter().zip(&d).map(|(a, b)| a + b).collect();
        prop_assert_eq!(complement_visual(&h, &d, 0.0).unwrap(), sum);
    }

    #[test]
    fn gate_shrinks_complement_monotonically(
        h in prop::collection::vec(-10f64..10.0, 2..8),
        c1 in 0f64..1.0,
        c2 in 0f64..1.0,
    ) {
        let d: Vec<f64> = h.iter().map(|x| x * 0.5 + 1.0).collect();
        let norm = |c: f64| {
            let hs = complement_visual(&h, &d, c).unwrap();
            hs.iter().zip(&h).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt()
        };
        let dn = d.iter().map(|x| x * x).sum::<f64>().sqrt();
        prop_assert!((norm(c1) - (1.0 - c1) * dn).abs() < 1e-9);
        if c1 < c2 {
            prop_assert!(norm(c1) >= norm(c2));
        }
    }
}

#[test]
fn classify_cases() {
    let mut m = model(5);
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let v = random_vecs(&mut rng, 3, H);
    let got = m.classify(&v[0], &v[1], &v[2]).unwrap();
    assert!(close(&got, &mlp(&m, "cls", &v.concat()), 1e-12));

    // permuting the output columns permutes the logits
    let perm = [2usize, 0, 1];
    let mut m2 = m.clone();
    for name in ["cls.w2", "cls.b2"] {
        let id = m.params().id(name).unwrap();
        let orig = m.params().get(id).value.clone();
        let t = &mut m2.params_mut().get_mut(id).value;
        for r in 0..orig.rows() {
            for (j, &pj) in perm.iter().enumerate() {
                t.set(r, j, orig.get(r, pj));
            }
        }
    }
    let permuted = m2.classify(&v[0], &v[1], &v[2]).unwrap();
    for (j, &pj) in perm.iter().enumerate() {
        assert_eq!(permuted[j], got[pj]);
    }

    for name in ["cls.w1", "cls.b1", "cls.w2", "cls.b2"] {
        let id = m.params().id(name).unwrap();
        m.params_mut().get_mut(id).value.data_mut().fill(0.0);
    }
    let z = m.classify(&v[0], &v[1], &v[2]).unwrap();
    assert_eq!(z, vec![0.0; K]);
    assert!(softmax(&z).iter().all(|&q| (q - 1.0 / K as f64).abs() < 1e-15));
}

#[test]
fn forward_matches_step_by_step_composition() {
    let m = model(6);
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let conv = conversation(&mut rng, "toy", 3);
    let traces = m.forward_conversation(&conv).unwrap();
    let hv = encode_oracle(&m, &conv.visual, "visual");
    let ht = encode_oracle(&m, &conv.text, "text");
    let ha = encode_oracle(&m, &conv.audio, "audio");
    for (i, tr) in traces.iter().enumerate() {
        let rt = retrieve_oracle(&m, &hv[i], &ht[..=i], "text");
        let ra = retrieve_oracle(&m, &hv[i], &ha[..=i], "audio");
        let delta = mlp(&m, "delta", &[sub(&rt, &hv[i]), sub(&ra, &hv[i])].concat());
        let aux = add(&vecmat(&hv[i], &p(&m, "aux.w")), &p(&m, "aux.b")[0]);
        let c = softmax(&aux).into_iter().fold(0.0, f64::max);
        let hs: Vec<f64> = hv[i].iter().zip(&delta).map(|(h, d)| h + (1.0 - c) * d).collect();
        let logits = mlp(&m, "cls", &[hs.clone(), rt.clone(), ra.clone()].concat());
        assert!(close(&tr.h_v, &hv[i], 1e-12));
        assert!(close(&tr.text_ref, &rt, 1e-12));
        assert!(close(&tr.audio_ref, &ra, 1e-12));
        assert!(close(&tr.delta, &delta, 1e-12));
        assert!(close(&tr.aux_logits, &aux, 1e-12));
        assert!((tr.c - c).abs() < 1e-12);
        assert!(close(&tr.h_v_star, &hs, 1e-12));
        assert!(close(&tr.logits, &logits, 1e-12));
        assert_eq!(tr.prediction, argmax(&tr.logits));
        assert_eq!(tr.gate, tr.c);
    }
}

#[test]
fn single_utterance_retrieves_own_value() {
    let m = model(7);
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let conv = conversation(&mut rng, "one", 1);
    let tr = &m.forward_conversation(&conv).unwrap()[0];
    let ht = encode_oracle(&m, &conv.text, "text");
    assert!(close(&tr.text_ref, &vecmat(&ht[0], &p(&m, "cross.text.wv")), 1e-12));
}

#[test]
fn future_perturbations_leave_past_traces_bit_identical() {
    let m = model(8);
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let conv = conversation(&mut rng, "c", 6);
    let other = conversation(&mut rng, "d", 4);
    let base = m.forward_batch(&Batch::new(&[&conv, &other]).unwrap()).unwrap();
    for j in 0..6 {
        let mut pert = conv.clone();
        for mm in Modality::ALL {
            for x in pert.modality_mut(mm)[j].iter_mut() {
                *x += 3.0;
            }
        }
        let got = m.forward_batch(&Batch::new(&[&pert, &other]).unwrap()).unwrap();
        for i in 0..j {
            assert_eq!(got[i], base[i]);
        }
        // the other conversation is untouched
        assert_eq!(got[6..], base[6..]);
    }
}

#[test]
fn current_key_mode_uses_only_the_same_step() {
    let mut cfg = small_config();
    cfg.retrieval = RetrievalKeys::Current;
    let m = FusionModel::init(cfg, 9).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let conv = conversation(&mut rng, "c", 3);
    let traces = m.forward_conversation(&conv).unwrap();
    let ht = encode_oracle(&m, &conv.text, "text");
    for (i, tr) in traces.iter().enumerate() {
        assert!(close(&tr.text_ref, &vecmat(&ht[i], &p(&m, "cross.text.wv")), 1e-12));
    }
}

#[test]
fn fixed_gates() {
    let mut cfg = small_config();
    cfg.gate = GateMode::Fixed(1.0);
    let m = FusionModel::init(cfg.clone(), 10).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    let conv = conversation(&mut rng, "c", 4);
    for tr in m.forward_conversation(&conv).unwrap() {
        assert_eq!(tr.h_v_star, tr.h_v);
        assert!(tr.c >= 1.0 / K as f64);
    }
    cfg.gate = GateMode::Fixed(0.0);
    let m = FusionModel::init(cfg, 10).unwrap();
    for tr in m.forward_conversation(&conv).unwrap() {
        assert_eq!(tr.logits, tr.logits_open_gate);
    }
    let mut bad = small_config();
    bad.gate = GateMode::Fixed(1.5);
    assert!(FusionModel::init(bad, 0).is_err());
}

#[test]
fn forward_passes_grad_check_with_gate_gradient() {
    let mut cfg = small_config();
    cfg.gate_gradient = true;
    let m = FusionModel::init(cfg, 11).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(15);
    let a = conversation(&mut rng, "a", 3);
    let b = conversation(&mut rng, "b", 2);
    let batch = Batch::new(&[&a, &b]).unwrap();
    let err = grad_check(m.params(), 1e-5, |tape, store| {
        let f = m.forward_with(tape, store, &batch)?;
        let ce = tape.cross_entropy(f.logits, &batch.labels)?;
        let zs = tape.matmul_t(f.z[0], f.z[1])?;
        let s = tape.sum(zs);
        tape.lin_comb(&[(ce, 1.0), (s, 0.1)])
    })
    .unwrap();
    assert!(err < 1e-6, "max error {err}");
}

#[test]
fn stop_gradient_keeps_aux_out_of_the_gate_path() {
    let m = model(12);
    let mut rng = ChaCha8Rng::seed_from_u64(16);
    let a = conversation(&mut rng, "a", 4);
    let batch = Batch::new(&[&a]).unwrap();
    let mut store = m.params().clone();
    store.zero_grads();
    let mut tape = Tape::new();
    let f = m.forward(&mut tape, &batch).unwrap();
    let ce = tape.cross_entropy(f.logits, &batch.labels).unwrap();
    tape.backward_into(ce, &mut store).unwrap();
    for name in ["aux.w", "aux.b"] {
        assert!(store.by_name(name).unwrap().grad.data().iter().all(|&g| g == 0.0));
    }

    let mut cfg = small_config();
    cfg.gate_gradient = true;
    let m2 = FusionModel::from_parts(cfg, m.params().clone()).unwrap();
    store.zero_grads();
    let mut tape = Tape::new();
    let f = m2.forward(&mut tape, &batch).unwrap();
    let ce = tape.cross_entropy(f.logits, &batch.labels).unwrap();
    tape.backward_into(ce, &mut store).unwrap();
    assert!(store.by_name("aux.w").unwrap().grad.data().iter().any(|&g| g != 0.0));
}

#[test]
fn text_ablation_ignores_text_features() {
    let mut cfg = small_config();
    cfg.use_text = false;
    let m = FusionModel::init(cfg, 13).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let conv = conversation(&mut rng, "c", 3);
    let mut other = conv.clone();
    other.text = random_vecs(&mut rng, 3, 2);
    let a = m.forward_conversation(&conv).unwrap();
    let b = m.forward_conversation(&other).unwrap();
    for (x, y) in a.iter().zip(&b) {
        assert_eq!(x.logits, y.logits);
    }
}

#[test]
fn from_parts_checks_shapes() {
    let m = model(14);
    let mut cfg = small_config();
    cfg.hidden = 5;
    assert!(FusionModel::from_parts(cfg, m.params().clone()).is_err());
    let ok = FusionModel::from_parts(small_config(), m.params().clone()).unwrap();
    assert_eq!(ok.params().len(), m.params().len());
}

#[test]
fn traces_round_trip_through_jsonl() {
    let m = model(15);
    let mut rng = ChaCha8Rng::seed_from_u64(18);
    let conv = conversation(&mut rng, "c", 3);
    let traces = m.forward_conversation(&conv).unwrap();
    let mut buf = Vec::new();
    write_traces(&mut buf, &traces).unwrap();
    let back = read_traces(&buf[..]).unwrap();
    assert_eq!(back.len(), 3);
    assert_eq!(back[1].prediction, traces[1].prediction);
    assert_eq!(back[2].conv_id, "c");
}
