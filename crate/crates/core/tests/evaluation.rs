use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use xlembed::data::load_split;
use xlembed::eval::{
    paired_distance_report, pca_project, render_svg, zero_shot_matrix, AccessEvent, ClassifierHyper,
    DocumentEmbedder, EmbeddingMatrix, EvalDataset, EvalError, ModelEmbedder, Split,
};
use xlembed::model::{Model, ModelConfig};
use xlembed::synth::{generate, SynthSpec};
use xlembed::tokenizer::learn_bpe;

const DIM: usize = 200;

/// Counts the base-token ids of `L<l>_w<t>` words into a bag, language-agnostic by construction.
struct BagOracle;

impl DocumentEmbedder for BagOracle {
    fn embed_documents(&self, docs: &[String]) -> Result<EmbeddingMatrix, EvalError> {
        let rows: Vec<Vec<f32>> = docs
            .iter()
            .map(|d| {
                let mut v = vec![0f32; DIM];
                for w in d.split(' ') {
                    let t: usize = w.rsplit("_w").next().unwrap().parse().unwrap();
                    v[t % DIM] += 1.0;
                }
                v
            })
            .collect();
        EmbeddingMatrix::from_rows(&rows)
    }
}

fn dataset(spec: &SynthSpec) -> (tempfile::TempDir, EvalDataset) {
    let dir = tempfile::tempdir().unwrap();
    generate(spec, dir.path()).unwrap();
    let s: Vec<_> = ["train", "dev", "test"].iter().map(|n| load_split(dir.path(), n).unwrap()).collect();
    let langs = s[0].languages().to_vec();
    let ds = EvalDataset::from_corpora(&langs, &s[0], &s[1], &s[2]).unwrap();
    (dir, ds)
}

fn small_spec() -> SynthSpec {
    SynthSpec {
        n_languages: 3,
        train_size: 400,
        dev_size: 80,
        test_size: 200,
        seed: 21,
        ..Default::default()
    }
}

fn hyper() -> ClassifierHyper {
    ClassifierHyper {
        max_epochs: 30,
        seed: 4,
        ..Default::default()
    }
}

#[test]
fn language_agnostic_features_transfer_across_languages() {
    let (_d, ds) = dataset(&small_spec());
    let m = zero_shot_matrix(&BagOracle, &ds, &hyper()).unwrap();
    assert!(m.cross().unwrap() > 3.0 * 100.0 / small_spec().n_classes as f64, "{}", m.to_tsv());
    assert!((m.cross().unwrap() - m.same()).abs() < 1e-9, "identical features give identical rows");
}

#[test]
fn shuffled_training_labels_give_chance_accuracy() {
    let spec = small_spec();
    let (_d, ds) = dataset(&spec);
    let langs = ds.languages().to_vec();
    let mut docs = BTreeMap::new();
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    for split in [Split::Train, Split::Dev, Split::Test] {
        for l in 0..langs.len() {
            let (d, lab) = ds.read(split, l);
            let mut lab = lab.to_vec();
            if split != Split::Test {
                lab.shuffle(&mut rng);
            }
            docs.insert((split, l), (d.to_vec(), lab));
        }
    }
    let shuffled = EvalDataset::new(langs, docs).unwrap();
    let m = zero_shot_matrix(&BagOracle, &shuffled, &hyper()).unwrap();
    let chance = 100.0 / spec.n_classes as f64;
    assert!((m.all() - chance).abs() <= 10.0, "{}", m.to_tsv());
}

#[test]
fn test_splits_are_read_once_and_never_before_their_row_is_fitted() {
    let (_d, ds) = dataset(&small_spec());
    zero_shot_matrix(&BagOracle, &ds, &hyper()).unwrap();
    let log = ds.access_log();
    let ev = |split, l: &str| AccessEvent {
        split,
        language: l.to_string(),
    };
    let mut want = vec![ev(Split::Train, "L0"), ev(Split::Dev, "L0")];
    want.extend(["L0", "L1", "L2"].map(|l| ev(Split::Test, l)));
    for l in ["L1", "L2"] {
        want.extend([ev(Split::Train, l), ev(Split::Dev, l)]);
    }
    assert_eq!(log, want);
}

#[test]
fn embeddings_do_not_depend_on_batch_grouping() {
    let dir = tempfile::tempdir().unwrap();
    generate(
        &SynthSpec {
            train_size: 40,
            dev_size: 5,
            test_size: 5,
            ..Default::default()
        },
        dir.path(),
    )
    .unwrap();
    let c = load_split(dir.path(), "train").unwrap();
    let text: Vec<&str> = c.all_sentences().collect();
    let vocab = learn_bpe(&text, 300).unwrap();
    let mut cfg = ModelConfig::toy(vocab.len(), 4);
    cfg.lazy_final_layer = true;
    let model = Model::new(cfg, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
    let mut emb = ModelEmbedder {
        model,
        vocab,
        languages: c.languages().to_vec(),
        max_doc_tokens: 750,
        batch_size: 64,
    };
    let docs: Vec<String> = c.sentences(2).to_vec();
    let all = emb.embed_documents(&docs).unwrap();
    emb.batch_size = 1;
    let single = emb.embed_documents(&docs).unwrap();
    emb.batch_size = 7;
    let sevens = emb.embed_documents(&docs).unwrap();
    for other in [&single, &sevens] {
        let d = all.data().iter().zip(other.data()).map(|(a, b)| (a - b).abs()).fold(0f32, f32::max);
        assert!(d <= 1e-5, "{d:e}");
    }
    emb.max_doc_tokens = 2;
    let framed = emb.frame(0, &docs[0]).unwrap();
    assert_eq!(framed.len(), 4);
    assert_eq!(&framed[1..3], &emb.vocab.encode(&docs[0])[..2]);
}

#[test]
fn pca_preserves_distances_of_planar_points() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let u = [0.6f32, 0.0, 0.8, 0.0];
    let w = [0.0f32, 1.0, 0.0, 0.0];
    let mut pts = Vec::new();
    for i in 0..30 {
        let (x, y) = (((i * 37) % 11) as f32 - 5.0, ((i * 13) % 7) as f32 * 0.5);
        pts.push((0..4).map(|k| x * u[k] + y * w[k] + 2.0).collect::<Vec<f32>>());
    }
    pts.shuffle(&mut rng);
    let a = EmbeddingMatrix::from_rows(&pts[..15]).unwrap();
    let b = EmbeddingMatrix::from_rows(&pts[15..]).unwrap();
    let p = pca_project(&a, &b).unwrap();
    let flat: Vec<[f64; 2]> = p.a.iter().chain(&p.b).copied().collect();
    for i in 0..30 {
        for j in 0..30 {
            let orig: f64 = pts[i].iter().zip(&pts[j]).map(|(x, y)| ((x - y) as f64).powi(2)).sum::<f64>().sqrt();
            let proj = ((flat[i][0] - flat[j][0]).powi(2) + (flat[i][1] - flat[j][1]).powi(2)).sqrt();
            assert!((orig - proj).abs() <= 1e-4, "{i},{j}: {orig} vs {proj}");
        }
    }
    assert!(p.variances[0] >= p.variances[1]);
    let svg = render_svg(&p, "planar");
    assert!(svg.starts_with("<svg") && svg.contains('+') && svg.contains('\u{2212}'));

    let same = EmbeddingMatrix::from_rows(&[vec![1.0, 2.0], vec![1.0, 2.0]]).unwrap();
    assert!(matches!(pca_project(&same, &same), Err(EvalError::DegenerateVariance)));
}

#[test]
fn paired_distance_report_by_hand() {
    let a = EmbeddingMatrix::from_rows(&[vec![1.0, 0.0], vec![0.0, 3.0]]).unwrap().with_language("a");
    let b = EmbeddingMatrix::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap().with_language("b");
    let r = paired_distance_report(&[a, b], 0.0).unwrap();
    // v_norm = (1 + 3 + 1 + 1) / 4 = 1.5; d_p rows: 0 and 4 / 1.5.
    assert_eq!(r.pairs.len(), 1);
    assert!((r.mean_d_p - (4.0 / 1.5) / 2.0).abs() < 1e-12);
    assert!((r.pairs[0].median_d_p - (4.0 / 1.5) / 2.0).abs() < 1e-12);
    // a -> b hits both rows; b -> a sends (0, 1) to (1, 0).
    assert_eq!(r.mean_retrieval, 0.75);
}

#[test]
fn emb1_files_round_trip_bitwise() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("x.emb");
    let m = EmbeddingMatrix::from_rows(&[vec![f32::MIN_POSITIVE, -0.0, 1.5e-40], vec![3.25, f32::MAX, -7.0]])
        .unwrap()
        .with_language("L3")
        .with_labels(vec!["c0".into(), "c2".into()])
        .unwrap();
    m.write(&path).unwrap();
    let first = std::fs::read(&path).unwrap();
    let back = EmbeddingMatrix::read(&path).unwrap();
    assert_eq!(&first[..4], b"EMB1");
    assert!(back.data().iter().zip(m.data()).all(|(a, b)| a.to_bits() == b.to_bits()));
    back.write(&path).unwrap();
    assert_eq!(std::fs::read(&path).unwrap(), first);
}
