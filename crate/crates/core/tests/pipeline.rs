//! Sampling, pairing and network behaviour on realistic batches.

mod common;

use cdp_core::dataset::{self, Modality, SynthConfig};
use cdp_core::imaging::{self, Spectrum, SpectrumTag};
use cdp_core::model::{self, EmbeddingModel, ForwardMode, ModelConfig, ParamTensor};
use cdp_core::rng;
use cdp_core::sampler::{self, IdentityIndex, Original, SamplerConfig, SpectrumDistribution};
use cdp_core::imaging::JitterConfig;
use common::*;

fn synthetic() -> Vec<(dataset::SampleRecord, imaging::ImageTensor)> {
    let cfg = SynthConfig {
        num_persons: 6,
        images_per_person_per_modality: 4,
        ..SynthConfig::default()
    };
    dataset::render_synthetic(&cfg).unwrap()
}

#[test]
fn spectrum_draw_frequencies_match_the_distribution() {
    let n = 100_000;
    for probs in [[0.25; 4], [0.1, 0.2, 0.3, 0.4], [0.0, 0.5, 0.0, 0.5]] {
        let dist = SpectrumDistribution::new(probs).unwrap();
        let mut r = rng::stream(41, &[]);
        let mut counts = [0usize; 4];
        for _ in 0..n {
            counts[sampler::dhsm_sample_spectrum(&dist, &mut r).index()] += 1;
        }
        for (c, p) in counts.iter().zip(probs) {
            let f = *c as f64 / n as f64;
            assert!((f - p).abs() < 0.01, "frequency {f} for probability {p}");
            if p == 0.0 {
                assert_eq!(*c, 0);
            }
        }
    }
}

#[test]
fn paired_pk_batches_keep_their_invariants() {
    let data = synthetic();
    let records: Vec<_> = data.iter().map(|(r, _)| r.clone()).collect();
    let manifest = dataset::DatasetManifest::from_records(".", records).unwrap();
    let index = IdentityIndex::new(&manifest);
    let cfg = SamplerConfig { p: 3, k: 4, rng_seed: 0 };
    let mut r = rng::stream(5, &[]);
    for _ in 0..50 {
        let items = sampler::pk_sample(&index, &cfg, &mut r).unwrap();
        let originals: Vec<Original<'_>> = items
            .iter()
            .map(|it| Original {
                image: &data[it.record].1,
                label: it.label,
                modality: manifest.records()[it.record].modality,
            })
            .collect();
        let batch = sampler::make_pairs(&originals, &SpectrumDistribution::uniform(), &JitterConfig::default(), &mut r).unwrap();
        batch.check_invariants(3, 4).unwrap();
        assert_eq!(batch.len(), 24);
        assert_eq!(batch.labels()[..12], batch.labels()[12..]);
        for (o, g) in batch.originals.iter().zip(&batch.generated) {
            let channels = imaging::extract_channel(&g.image, imaging::Channel::R).unwrap();
            assert_eq!(imaging::expand_channels(&channels).unwrap(), g.image);
            if o.tag == SpectrumTag::OriginalIr {
                assert_eq!(g.tag, SpectrumTag::IrJitter);
            }
        }
    }
}

#[test]
fn gray_only_distribution_always_generates_gray() {
    let data = synthetic();
    let visible: Vec<Original<'_>> = data
        .iter()
        .filter(|(r, _)| r.modality == Modality::Visible)
        .map(|(r, img)| Original { image: img, label: r.label, modality: r.modality })
        .collect();
    let dist = SpectrumDistribution::new([0.0, 0.0, 0.0, 1.0]).unwrap();
    let batch = sampler::make_pairs(&visible, &dist, &JitterConfig::default(), &mut rng::stream(1, &[])).unwrap();
    for (src, g) in visible.iter().zip(&batch.generated) {
        assert_eq!(g.tag.spectrum(), Some(Spectrum::X));
        let gray = imaging::to_gray(src.image).unwrap();
        assert_eq!(g.image, imaging::expand_channels(&gray).unwrap());
    }
}

#[test]
fn inverted_dropout_preserves_the_expected_embedding() {
    let model = small_model(4, 3);
    let mut r = rng::stream(9, &[]);
    let x = imaging::normalize(&random_image(&mut r, 16, 8, 3)).unwrap().to_planar();
    let clean = model.forward_planar(std::slice::from_ref(&x), ForwardMode::Eval).unwrap();
    let masks = 10_000u64;
    let d = model.config().embedding_dim;
    let mut kept = vec![0.0; d];
    for s in 0..masks {
        let out = model.forward_planar(std::slice::from_ref(&x), ForwardMode::Train { dropout_seed: s }).unwrap();
        assert_eq!(out.embeddings, clean.embeddings, "dropout must not touch the embedding itself");
        for (k, m) in kept.iter_mut().zip(out.trace.dropout_mask(0)) {
            assert!(*m == 0.0 || *m == 2.0);
            *k += m;
        }
    }
    for k in &kept {
        let mean = k / masks as f64;
        assert!((mean - 1.0).abs() < 0.05, "mean multiplier {mean}");
    }
    let mean = kept.iter().sum::<f64>() / (masks as f64 * d as f64);
    assert!((mean - 1.0).abs() < 0.01, "overall mean multiplier {mean}");
}

#[test]
fn expanded_gray_input_equals_summed_first_layer_kernels() {
    let full = small_model(4, 21);
    let cfg1 = ModelConfig { input_size: (16, 8, 1), ..full.config().clone() };
    let mut tensors: Vec<ParamTensor> = full.tensors().to_vec();
    let w = &tensors[model::CONV1_W];
    let c1 = w.shape[0];
    let mut summed = vec![0.0; c1 * 9];
    for o in 0..c1 {
        for c in 0..3 {
            for k in 0..9 {
                summed[o * 9 + k] += w.data[(o * 3 + c) * 9 + k];
            }
        }
    }
    tensors[model::CONV1_W] = ParamTensor { name: w.name.clone(), shape: vec![c1, 1, 3, 3], data: summed };
    let gray_model = EmbeddingModel::from_tensors(cfg1, tensors).unwrap();
    let mut r = rng::stream(22, &[]);
    let ir = random_image(&mut r, 16, 8, 1);
    let expanded = imaging::normalize(&imaging::expand_channels(&ir).unwrap()).unwrap().to_planar();
    let single = imaging::normalize(&ir).unwrap().to_planar();
    let a = full.embed_planar(&[expanded]).unwrap();
    let b = gray_model.embed_planar(&[single]).unwrap();
    for (x, y) in a.as_slice().iter().zip(b.as_slice()) {
        assert!((x - y).abs() < 1e-12, "{x} vs {y}");
    }
}

#[test]
fn softmax_of_real_logits_sums_to_one() {
    let model = small_model(5, 4);
    let mut r = rng::stream(10, &[]);
    let batch = paired_batch(&mut r, 2, 2, 16, 8, 5);
    let out = model.forward_planar(&batch.inputs, ForwardMode::Eval).unwrap();
    let probs = model::softmax_rows(&out.logits);
    for i in 0..probs.rows() {
        let s: f64 = probs.row(i).iter().sum();
        assert!((s - 1.0).abs() < 1e-12);
        assert!(probs.row(i).iter().all(|&p| p > 0.0));
    }
}
