mod common;

use common::*;
use proptest::prelude::*;
use tagstream::tagging::reference::ReferenceSpectralTagger;
use tagstream::tagging::{TagError, Tagger, TaggerSpec, TaggingStage};
use tagstream::windowing::SampleWindow;

fn window(samples: Vec<f32>) -> SampleWindow {
    SampleWindow { samples, start_timestamp_100ns: 0, sample_rate_hz: RATE }
}

#[test]
fn sine_440_is_tone_mid_above_0_9() {
    let x = sine(440.0, 1.0, 48128, RATE);
    let mut t = ReferenceSpectralTagger::default();
    let preds = t.predict(&x, RATE).unwrap();
    assert_eq!(preds[0].label, "ToneMid");
    assert!(preds[0].score > 0.9, "{}", preds[0].score);

    // Independent band shares from a direct DFT.
    let o = oracle_spectrum(&x, RATE);
    let share = o.bands[1] / o.bands.iter().sum::<f64>();
    assert!((preds[0].score - share).abs() < 1e-9, "{} vs {share}", preds[0].score);
}

#[test]
fn half_amplitude_noise_is_noise() {
    let x = noise(0.5, 8192, 11);
    let o = oracle_spectrum(&x, RATE);
    assert!(o.flatness > 0.5, "oracle flatness {}", o.flatness);
    let preds = ReferenceSpectralTagger::default().predict(&x, RATE).unwrap();
    assert_eq!(preds[0].label, "Noise");
    assert!((preds[0].score - o.flatness).abs() < 1e-9);
}

#[test]
fn silence_window() {
    let preds = ReferenceSpectralTagger::default().predict(&vec![0.0; 48128], RATE).unwrap();
    assert_eq!(preds.len(), 1);
    assert_eq!((preds[0].label.as_str(), preds[0].score), ("Silence", 1.0));
    // Just under the threshold still counts as silence.
    let quiet = sine(1000.0, 1.0e-4, 4096, RATE);
    assert_eq!(ReferenceSpectralTagger::default().predict(&quiet, RATE).unwrap()[0].label, "Silence");
}

#[test]
fn stage_rejects_wrong_length() {
    let mut stage = TaggingStage::new(TaggerSpec::Reference.build(), Some(48128), 5);
    assert!(matches!(stage.tag(&window(vec![0.0; 1024])), Err(TagError::ContractViolation(_))));
}

#[test]
fn determinism_excluding_inference_time() {
    let x = sine(3000.0, 0.3, 8192, RATE);
    let mut stage = TaggingStage::new(TaggerSpec::Reference.build(), Some(8192), 5);
    let mut a = stage.tag(&window(x.clone())).unwrap();
    let mut b = stage.tag(&window(x)).unwrap();
    a.inference_ms = 0.0;
    b.inference_ms = 0.0;
    assert_eq!(a, b);
}

#[test]
fn top_k_truncates_and_orders() {
    let x: Vec<f32> =
        sine(100.0, 0.5, 8192, RATE).iter().zip(sine(1000.0, 0.3, 8192, RATE)).map(|(a, b)| a + b).collect();
    let mut stage = TaggingStage::new(TaggerSpec::Reference.build(), None, 2);
    let r = stage.tag(&window(x)).unwrap();
    assert_eq!(r.predictions.len(), 2);
    assert_eq!(r.predictions[0].label, "ToneLow");
    assert_eq!(r.predictions[1].label, "ToneMid");
    assert!(r.inference_ms >= 0.0);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn tone_scores_sum_to_one(freq in 30.0f64..7900.0, amp in 0.01f64..1.0, n in 1024usize..8192) {
        let x = sine(freq, amp, n, RATE);
        let preds = ReferenceSpectralTagger::default().predict(&x, RATE).unwrap();
        prop_assert!(preds.iter().all(|p| (0.0..=1.0).contains(&p.score)));
        if preds.len() == 3 {
            let sum: f64 = preds.iter().map(|p| p.score).sum();
            prop_assert!((sum - 1.0).abs() < 1e-6);
            prop_assert!(preds.windows(2).all(|w| w[0].score >= w[1].score));
        }
    }

    #[test]
    fn top_label_matches_oracle(freq in 25.0f64..7900.0, amp in 0.001f64..1.0, noise_amp in 0.0f32..0.3, seed in any::<u64>()) {
        let n = 2048;
        let x: Vec<f32> = sine(freq, amp, n, RATE).iter().zip(noise(noise_amp, n, seed)).map(|(a, b)| a + b).collect();
        let preds = ReferenceSpectralTagger::default().predict(&x, RATE).unwrap();
        prop_assert_eq!(preds[0].label.as_str(), oracle_top_label(&x, RATE));
    }
}
