mod common;

use std::collections::BTreeSet;
use std::io::Write;

use common::small_spec;
use flowfm_core::data::{
    apply_stats, dominant_frequency, frequency_bin, load_csv, magnitude_spectrum, normalize, save_csv, split,
    synthesize, SignalWindow, SynthSpec, NUM_CHANNELS, WINDOW_LEN,
};
use flowfm_core::Error;

#[test]
fn noiseless_windows_peak_at_their_class_frequency() {
    let spec = SynthSpec::noiseless(3);
    let data = synthesize(&spec).unwrap();
    assert_eq!(data.len(), 3 * 4 * 16);
    for w in &data.windows {
        let f = spec.base_freqs[w.class_id];
        assert!((dominant_frequency(w) - f).abs() < 0.051, "class {}", w.class_id);
        let spec_mag = magnitude_spectrum(w);
        let peak = (1..spec_mag.len()).max_by(|&a, &b| spec_mag[a].total_cmp(&spec_mag[b])).unwrap();
        assert_eq!(peak, frequency_bin(f));
    }
}

#[test]
fn pure_tone_spectrum() {
    // 3 Hz tone: 30 cycles in 300 samples lands on bin 30.
    let samples: Vec<f64> = (0..NUM_CHANNELS * WINDOW_LEN)
        .map(|i| (std::f64::consts::TAU * 3.0 * (i % WINDOW_LEN) as f64 / 30.0).sin())
        .collect();
    let w = SignalWindow::new(samples, 0, 0).unwrap();
    let mag = magnitude_spectrum(&w);
    assert_eq!(mag.len(), WINDOW_LEN / 2 + 1);
    assert!((mag[30] - 3.0 * WINDOW_LEN as f64 / 2.0).abs() < 1e-8);
    assert_eq!(dominant_frequency(&w), 3.0);
}

#[test]
fn synthesis_is_seeded() {
    let a = synthesize(&small_spec(1)).unwrap();
    let b = synthesize(&small_spec(1)).unwrap();
    let c = synthesize(&small_spec(2)).unwrap();
    assert_eq!(a, b);
    assert_ne!(a, c);
    let bad = SynthSpec { base_freqs: vec![1.0, 1.0, 2.0], ..small_spec(1) };
    assert!(synthesize(&bad).is_err());
    let high = SynthSpec { base_freqs: vec![1.0, 2.0, 8.0], ..small_spec(1) };
    assert!(synthesize(&high).is_err());
}

#[test]
fn normalization_round_trip() {
    let raw = synthesize(&small_spec(4)).unwrap();
    let (norm, stats) = normalize(&raw).unwrap();
    let x = norm.all_tensor();
    for c in 0..NUM_CHANNELS {
        let vals: Vec<f64> = norm.windows.iter().flat_map(|w| w.channel(c).to_vec()).collect();
        let mean = vals.iter().sum::<f64>() / vals.len() as f64;
        let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / vals.len() as f64;
        assert!(mean.abs() < 1e-10);
        assert!((var - 1.0).abs() < 1e-10);
    }
    let mut back = x.clone();
    for chunk in back.data_mut().chunks_mut(NUM_CHANNELS * WINDOW_LEN) {
        stats.denormalize(chunk);
    }
    assert!(back.max_abs_diff(&raw.all_tensor()).unwrap() < 1e-12);
    assert_eq!(apply_stats(&raw, &stats), norm);
}

#[test]
fn split_is_subject_disjoint_and_covers_classes() {
    let data = synthesize(&SynthSpec::standard(0)).unwrap();
    for seed in 0..20 {
        let (train, eval) = split(&data, 0.5, seed).unwrap();
        assert_eq!(train.len() + eval.len(), data.len());
        let ts: BTreeSet<usize> = train.windows.iter().map(|w| w.subject_id).collect();
        let es: BTreeSet<usize> = eval.windows.iter().map(|w| w.subject_id).collect();
        assert!(ts.is_disjoint(&es));
        assert_eq!(train.labels().into_iter().collect::<BTreeSet<_>>().len(), 3);
        assert_eq!(eval.labels().into_iter().collect::<BTreeSet<_>>().len(), 3);
    }
    assert_eq!(split(&data, 0.5, 3).unwrap(), split(&data, 0.5, 3).unwrap());
}

#[test]
fn split_falls_back_to_windows_with_one_subject() {
    let spec = SynthSpec { subjects_per_class: 1, windows_per_subject: 5, ..small_spec(5) };
    let data = synthesize(&spec).unwrap();
    let (train, eval) = split(&data, 0.6, 0).unwrap();
    assert_eq!(train.len(), 9);
    assert_eq!(eval.len(), 6);
}

#[test]
fn csv_round_trip_is_exact() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("w.csv");
    let data = synthesize(&small_spec(6)).unwrap();
    save_csv(&data, &path, &["made by a test".into()], None).unwrap();
    assert_eq!(load_csv(&path).unwrap(), data);
    let tagged = dir.path().join("g.csv");
    save_csv(&data, &tagged, &[], Some("generated")).unwrap();
    assert_eq!(load_csv(&tagged).unwrap(), data);
    let text = std::fs::read_to_string(&path).unwrap();
    assert!(text.starts_with("# made by a test\nwindow_id,class_id,subject_id,step,ax,ay,az\n"));
}

fn write(dir: &tempfile::TempDir, name: &str, body: &str) -> std::path::PathBuf {
    let path = dir.path().join(name);
    std::fs::File::create(&path).unwrap().write_all(body.as_bytes()).unwrap();
    path
}

fn rows(id: usize, n: usize, class: usize) -> String {
    (0..n).map(|s| format!("{id},{class},0,{s},0.1,0.2,0.3\n")).collect()
}

#[test]
fn csv_errors_name_the_line() {
    let dir = tempfile::tempdir().unwrap();
    let header = "window_id,class_id,subject_id,step,ax,ay,az\n";

    let short = write(&dir, "short.csv", &format!("{header}{}", rows(0, 299, 0)));
    assert!(matches!(load_csv(&short), Err(Error::Csv { .. })));

    let mut body = format!("{header}{}", rows(0, 300, 0));
    body = body.replacen("0,0,0,5,0.1,0.2,0.3", "0,0,0,5,abc,0.2,0.3", 1);
    let bad = write(&dir, "bad.csv", &body);
    match load_csv(&bad) {
        Err(Error::Csv { line, .. }) => assert_eq!(line, 7),
        other => panic!("expected CSV error, got {other:?}"),
    }

    let wrong = write(&dir, "hdr.csv", &format!("a,b,c\n{}", rows(0, 300, 0)));
    assert!(matches!(load_csv(&wrong), Err(Error::Csv { line: 1, .. })));
    let wrong = write(&dir, "hdr2.csv", &format!("# note\na,b,c\n{}", rows(0, 300, 0)));
    let e = load_csv(&wrong); assert!(matches!(e, Err(Error::Csv { line: 2, .. })), "{e:?}");

    let mixed = format!("{header}{}", rows(0, 300, 0)).replacen("0,0,0,10,", "0,1,0,10,", 1);
    let mixed = write(&dir, "mixed.csv", &mixed);
    assert!(matches!(load_csv(&mixed), Err(Error::Csv { .. })));

    let two = write(&dir, "two.csv", &format!("# comment\n{header}{}{}", rows(0, 300, 0), rows(1, 300, 2)));
    let b = load_csv(&two).unwrap();
    assert_eq!(b.labels(), vec![0, 2]);
    assert_eq!(b.num_classes(), 3);
}
