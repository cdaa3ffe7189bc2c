use std::ffi::{CStr, CString};
use std::path::Path;
use std::ptr;

use radlabel::annotation::contains;
use radlabel::checkpoint::Checkpoint;
use radlabel::corpus::{generate_corpus, GeneratorSpec};
use radlabel::encoder::EncoderConfig;
use radlabel::head::HeadConfig;
use radlabel::model::{ModelConfig, ReportClassifier, Task};
use radlabel::pooling::AttentionRecord;
use radlabel::tokenizer::Vocabulary;
use radlabel_ffi::*;

fn c(s: &str) -> CString {
    CString::new(s).unwrap()
}

fn path(p: &Path) -> CString {
    c(p.to_str().unwrap())
}

fn last_error() -> String {
    unsafe { CStr::from_ptr(rl_last_error()) }
        .to_string_lossy()
        .into_owned()
}

fn saved_model(dir: &Path, task: Task) -> (ReportClassifier, Vocabulary) {
    let reports = generate_corpus(&GeneratorSpec {
        n_reports: 30,
        ..Default::default()
    })
    .unwrap();
    let vocab = Vocabulary::build(&reports, 1).unwrap();
    let d = 8;
    let config = ModelConfig {
        encoder: EncoderConfig {
            vocab_size: vocab.len(),
            d_model: d,
            n_layers: 1,
            n_heads: 2,
            ffn_width: 16,
            max_len: 32,
            dropout_rate: 0.0,
            seed: 3,
        },
        head: HeadConfig::scaled(d, task.n_outputs(), 4),
        ..ModelConfig::desk(vocab.len(), task, 3)
    };
    let model = ReportClassifier::new(config).unwrap();
    let ck = dir.join("model.ckpt");
    model.to_checkpoint().unwrap().save(&ck).unwrap();
    vocab.save(&dir.join("vocab.txt")).unwrap();
    // Checkpoints store f32, so compare against the reloaded weights.
    (
        ReportClassifier::from_checkpoint(&Checkpoint::load(&ck).unwrap()).unwrap(),
        vocab,
    )
}

const TEXT: &str = "There is a large mass in the left frontal lobe.";

#[test]
fn classifier_round_trip() {
    let tmp = tempfile::tempdir().unwrap();
    let (model, vocab) = saved_model(tmp.path(), Task::Granular);
    let mut h: *mut RlClassifier = ptr::null_mut();
    let status = unsafe {
        rl_classifier_load(
            path(&tmp.path().join("model.ckpt")).as_ptr(),
            path(&tmp.path().join("vocab.txt")).as_ptr(),
            &mut h,
        )
    };
    assert_eq!(status, RlStatus::Ok, "{}", last_error());
    assert!(!h.is_null());

    let mut n = 0usize;
    assert_eq!(unsafe { rl_classifier_num_outputs(h, &mut n) }, RlStatus::Ok);
    assert_eq!(n, 5);

    let text = c(TEXT);
    let mut probs = [0.0f64; 5];
    let mut written = 0usize;
    let status = unsafe { rl_classifier_predict(h, text.as_ptr(), probs.as_mut_ptr(), 2, &mut written) };
    assert_eq!(status, RlStatus::BufferTooSmall);
    assert_eq!(written, 5);
    let status = unsafe { rl_classifier_predict(h, text.as_ptr(), probs.as_mut_ptr(), 5, &mut written) };
    assert_eq!(status, RlStatus::Ok);
    let seq = vocab.encode(TEXT, model.max_len());
    let expected = model.predict(&[&seq]).unwrap().remove(0).probs;
    assert_eq!(probs.to_vec(), expected);

    let mut json: *mut std::ffi::c_char = ptr::null_mut();
    let id = c("R1");
    let status = unsafe { rl_classifier_attention_json(h, id.as_ptr(), text.as_ptr(), &mut json) };
    assert_eq!(status, RlStatus::Ok);
    let record: AttentionRecord = serde_json::from_str(unsafe { CStr::from_ptr(json) }.to_str().unwrap()).unwrap();
    unsafe { rl_string_free(json) };
    assert_eq!(record, model.attention_record("R1", &seq, &vocab).unwrap());

    unsafe { rl_classifier_free(h) };
    unsafe { rl_classifier_free(ptr::null_mut()) };
}

#[test]
fn load_failures_set_status_and_message() {
    let tmp = tempfile::tempdir().unwrap();
    let mut h: *mut RlClassifier = ptr::null_mut();
    let missing = path(&tmp.path().join("nope.ckpt"));
    let status = unsafe { rl_classifier_load(missing.as_ptr(), missing.as_ptr(), &mut h) };
    assert_eq!(status, RlStatus::Io);
    assert!(h.is_null());
    assert!(last_error().contains("nope.ckpt"));

    let status = unsafe { rl_classifier_load(ptr::null(), missing.as_ptr(), &mut h) };
    assert_eq!(status, RlStatus::NullPointer);

    // Vocabulary that does not match the checkpoint.
    saved_model(tmp.path(), Task::Coarse);
    let other = tmp.path().join("other.txt");
    let reports = generate_corpus(&GeneratorSpec {
        n_reports: 3,
        seed: 99,
        ..Default::default()
    })
    .unwrap();
    Vocabulary::build(&reports, 1).unwrap().save(&other).unwrap();
    let status = unsafe {
        rl_classifier_load(
            path(&tmp.path().join("model.ckpt")).as_ptr(),
            path(&other).as_ptr(),
            &mut h,
        )
    };
    assert_eq!(status, RlStatus::InvalidArgument);

    let bad = [0xffu8, 0xfe, 0];
    let status = unsafe { rl_classifier_load(bad.as_ptr().cast(), missing.as_ptr(), &mut h) };
    assert_eq!(status, RlStatus::InvalidUtf8);
}

#[test]
fn polygon_containment_matches_core() {
    let poly = [0.0, 0.0, 4.0, 0.0, 4.0, 4.0, 2.0, 1.0, 0.0, 4.0];
    let pts = [1.0, 0.5, 2.0, 3.0, 0.0, 2.0, 5.0, 5.0, 2.0, 1.0];
    let mut inside = [9u8; 5];
    let status = unsafe { rl_points_in_polygon(poly.as_ptr(), 5, pts.as_ptr(), 5, inside.as_mut_ptr()) };
    assert_eq!(status, RlStatus::Ok);
    let polygon: Vec<[f64; 2]> = poly.chunks(2).map(|c| [c[0], c[1]]).collect();
    let expected: Vec<u8> = pts.chunks(2).map(|p| contains(&polygon, [p[0], p[1]]) as u8).collect();
    assert_eq!(inside.to_vec(), expected);
    assert_eq!(inside, [1, 0, 1, 0, 1]);

    let status = unsafe { rl_points_in_polygon(poly.as_ptr(), 2, pts.as_ptr(), 5, inside.as_mut_ptr()) };
    assert_eq!(status, RlStatus::InvalidArgument);
}

#[test]
fn metrics_match_core() {
    let probs = [0.9, 0.2, 0.5, 0.4, 0.7, 0.1];
    let labels = [1u8, 0, 0, 1, 1, 0];
    let mut c = RlConfusion::default();
    assert_eq!(
        unsafe { rl_confusion(probs.as_ptr(), labels.as_ptr(), 6, 0.5, &mut c) },
        RlStatus::Ok
    );
    assert_eq!(
        c,
        RlConfusion {
            true_positives: 2,
            false_positives: 1,
            true_negatives: 2,
            false_negatives: 1
        }
    );
    let mut s = RlSummary::default();
    assert_eq!(unsafe { rl_summarize(&c, &mut s) }, RlStatus::Ok);
    assert_eq!(s.accuracy, 100.0 * 4.0 / 6.0);
    assert_eq!(s.sensitivity, 100.0 * 2.0 / 3.0);

    let bad = [1u8, 2, 0, 1, 1, 0];
    assert_eq!(
        unsafe { rl_confusion(probs.as_ptr(), bad.as_ptr(), 6, 0.5, &mut c) },
        RlStatus::InvalidArgument
    );
    assert!(last_error().contains("not binary"));
}
