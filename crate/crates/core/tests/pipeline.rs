use hilbertmed::evalkit::{load_dataset, save_dataset, segment_all};
use hilbertmed::hilbert::{ScanOrder, ScanScheme};
use hilbertmed::net::{SegConfig, Segmenter};
use hilbertmed::numkernel::{Ctx, ParamStore, Tape, Tensor};
use hilbertmed::prompt::{extract_attributes, render_sentence, Classifier, ClassifierMode, ClsExample, PromptConfig};
use hilbertmed::synth::{synth_dataset, SynthSpec};
use hilbertmed::Error;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn tiny_spec(n: usize) -> SynthSpec {
    SynthSpec { n, extents: [16, 16, 16], radius: (2.0, 3.5), ..SynthSpec::default() }
}

fn tiny_seg() -> SegConfig {
    SegConfig { channels: [2, 2, 3, 3], d_state: 2, window: 16, steps: 3, ..SegConfig::default() }
}

#[test]
fn checkpoint_roundtrip_preserves_predictions() {
    let data = synth_dataset(&tiny_spec(3), 5).unwrap();
    let pairs: Vec<_> = data.iter().map(|s| (&s.volume, &s.mask)).collect();
    let mut seg = Segmenter::new(tiny_seg()).unwrap();
    seg.fit(&pairs, 3, |_, _| {}).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("seg.hvck");
    seg.save(&path).unwrap();
    let back = Segmenter::load(&path).unwrap();
    for s in &data {
        let (a, b) = (seg.predict(&s.volume).unwrap(), back.predict(&s.volume).unwrap());
        assert!(a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits()));
    }
}

#[test]
fn parallel_segmentation_matches_serial() {
    let data = synth_dataset(&tiny_spec(4), 6).unwrap();
    let seg = Segmenter::new(tiny_seg()).unwrap();
    let vols: Vec<_> = data.iter().map(|s| &s.volume).collect();
    let serial: Vec<_> = vols.iter().map(|v| seg.segment(v).unwrap()).collect();
    assert_eq!(segment_all(&seg, &vols, 3).unwrap(), serial);
    assert!(matches!(segment_all(&seg, &vols, 0), Err(Error::Parameter(_))));
}

#[test]
fn dataset_on_disk_feeds_the_classifier() {
    let spec = tiny_spec(6);
    let data = synth_dataset(&spec, 9).unwrap();
    let dir = tempfile::tempdir().unwrap();
    save_dataset(dir.path(), &spec, 9, &data).unwrap();
    let (manifest, loaded) = load_dataset(dir.path()).unwrap();
    assert_eq!(manifest.cases.len(), 6);
    let ex: Vec<_> = loaded
        .iter()
        .map(|s| ClsExample { volume: &s.volume, mask: &s.mask, gt_mask: &s.mask, label: s.label })
        .collect();
    let cfg = PromptConfig { batch: 3, width: 8, d_state: 2, mode: ClassifierMode::Fused, ..PromptConfig::default() };
    let mut cls = Classifier::new(cfg).unwrap();
    let mut losses = Vec::new();
    cls.fit(&ex, 2, |_, l| losses.push(l)).unwrap();
    assert_eq!(losses.len(), 2);
    assert!(losses.iter().all(|l| l.is_finite()));
    let p = cls.classify(&ex[0].input()).unwrap();
    assert!((p.probs.iter().sum::<f64>() - 1.0).abs() < 1e-9);
    let sentence = render_sentence(&extract_attributes(&loaded[0].mask, loaded[0].mask.spacing()));
    assert!(sentence.starts_with("Lesion detected in the "), "{sentence}");
}

#[test]
fn token_roundtrip_through_the_tape() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let x = Tensor::randn(&[3, 6, 5, 4], 1.0, &mut rng);
    let store = ParamStore::new();
    for scheme in ScanScheme::ALL {
        let order = ScanOrder::new(scheme, &[6, 5, 4]).unwrap();
        let tape = Tape::new();
        let ctx = Ctx::new(&tape, &store);
        let tokens = order.to_tokens(ctx.constant(x.clone())).unwrap();
        assert_eq!(tokens.shape(), vec![120, 3]);
        let back = order.from_tokens(tokens).unwrap().value();
        assert_eq!(*back, x);
    }
}
