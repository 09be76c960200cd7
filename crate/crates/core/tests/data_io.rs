use std::collections::BTreeSet;
use std::fs;

use musedec::io::{default_class_names, DatasetManifest};
use musedec::neuro::{split_dataset, synth_generate, SplitSpec, StimulusMode, SubjectDataset, SynthDataConfig};
use musedec::stimfeat::synth_features;
use musedec::{Error, Tensor};

fn written() -> (tempfile::TempDir, std::path::PathBuf, musedec::neuro::Experiment) {
    let f = synth_features(24, 3, 4, 5, 8).unwrap().set;
    let ds = synth_generate(&f, &SynthDataConfig::new(2, 24, 3, 4, 2.0, 8)).unwrap();
    let exp = ds.experiment("io", f).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = DatasetManifest::write(dir.path(), &exp, &default_class_names(3)).unwrap();
    (dir, path, exp)
}

#[test]
fn manifest_round_trip_is_exact() {
    let (_dir, path, exp) = written();
    let back = DatasetManifest::load(&path).unwrap();
    assert_eq!(back.name, exp.name);
    assert_eq!(back.mode, exp.mode);
    assert_eq!(back.roi_names, exp.roi_names);
    assert_eq!(back.features, exp.features);
    assert_eq!(back.subjects, exp.subjects);
}

#[test]
fn truncated_tensor_is_rejected() {
    let (dir, path, _) = written();
    let file = dir.path().join("sub-01_responses.msed");
    let bytes = fs::read(&file).unwrap();
    fs::write(&file, &bytes[..bytes.len() - 8]).unwrap();
    let err = DatasetManifest::load(&path).unwrap_err();
    assert!(matches!(err, Error::BadMagic { .. } | Error::DimMismatch { .. }), "{err}");
    fs::write(&file, &bytes[..3]).unwrap();
    assert!(matches!(DatasetManifest::load(&path), Err(Error::BadMagic { .. })));
}

#[test]
fn label_rows_must_follow_ids() {
    let (dir, path, _) = written();
    let file = dir.path().join("sub-02_labels.csv");
    let text = fs::read_to_string(&file).unwrap();
    let mut lines: Vec<&str> = text.lines().collect();
    lines.swap(1, 2);
    fs::write(&file, lines.join("\n") + "\n").unwrap();
    let err = DatasetManifest::load(&path).unwrap_err();
    assert!(matches!(err, Error::Validation(_)), "{err}");
    assert_eq!(err.exit_code(), 3);
}

#[test]
fn duplicate_ids_are_rejected() {
    let (dir, path, _) = written();
    let file = dir.path().join("features_ids.txt");
    let text = fs::read_to_string(&file).unwrap();
    let first = text.lines().next().unwrap().to_string();
    let replaced: Vec<String> =
        text.lines().enumerate().map(|(i, l)| if i == 1 { first.clone() } else { l.to_string() }).collect();
    fs::write(&file, replaced.join("\n") + "\n").unwrap();
    assert!(matches!(DatasetManifest::load(&path), Err(Error::DuplicateId(_))));
}

#[test]
fn missing_file_is_an_io_error() {
    let (dir, path, _) = written();
    fs::remove_file(dir.path().join("features_hlv.msed")).unwrap();
    assert!(matches!(DatasetManifest::load(&path), Err(Error::Io { .. })));
}

fn subject(id: &str, stimuli: &[String]) -> SubjectDataset {
    let n = stimuli.len();
    SubjectDataset::new(id, Tensor::zeros(&[n, 1, 1]), stimuli.to_vec(), Tensor::zeros(&[n, 2])).unwrap()
}

#[test]
fn same_stimuli_split_sizes_are_exact() {
    let ids: Vec<String> = (0..2964).map(|i| format!("img{i}")).collect();
    let subjects = vec![subject("a", &ids)];
    let s = split_dataset(&subjects, &SplitSpec::counts(StimulusMode::SameStimuli, 2000, 265, 699, 0)).unwrap();
    assert_eq!((s[0].train.len(), s[0].val.len(), s[0].test.len()), (2000, 265, 699));
}

#[test]
fn disjoint_split_keeps_training_stimuli_private() {
    let shared: Vec<String> = (0..30).map(|i| format!("shared{i}")).collect();
    let subjects: Vec<SubjectDataset> = (0..3)
        .map(|s| {
            let mut ids: Vec<String> = (0..90).map(|i| format!("s{s}_{i}")).collect();
            ids.extend(shared.iter().cloned());
            subject(&format!("sub{s}"), &ids)
        })
        .collect();
    let splits =
        split_dataset(&subjects, &SplitSpec::counts(StimulusMode::DisjointStimuli, 80, 10, 0, 3)).unwrap();
    let train_sets: Vec<BTreeSet<&str>> = splits
        .iter()
        .zip(&subjects)
        .map(|(sp, d)| sp.train.iter().map(|&i| d.stimulus_ids[i].as_str()).collect())
        .collect();
    for a in 0..3 {
        assert_eq!(splits[a].test.len(), 30);
        for b in a + 1..3 {
            assert!(train_sets[a].is_disjoint(&train_sets[b]));
        }
    }
}
