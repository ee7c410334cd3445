use std::path::Path;

use alref_core::audio_seg::AudioClip;
use alref_core::config::Task;
use alref_core::eval::maskio::{write_labels, write_mask};
use alref_core::eval::score::score_predictions;
use alref_core::eval::{Dataset, LoadOptions, SampleQuery};
use alref_core::types::BinaryMask;
use image::RgbImage;
use serde_json::json;

fn frame(path: &Path, shade: u8) {
    std::fs::create_dir_all(path.parent().unwrap()).unwrap();
    RgbImage::from_pixel(8, 6, image::Rgb([shade, 0, 0])).save(path).unwrap();
}

fn truth_opts() -> LoadOptions {
    LoadOptions {
        require_truth: true,
        ..Default::default()
    }
}

/// One video, three frames, objects 1 and 2 side by side.
fn rvos_video(root: &Path, vid: &str, expressions: serde_json::Value) {
    let names = ["00000", "00005", "00010"];
    for (i, n) in names.iter().enumerate() {
        frame(&root.join("JPEGImages").join(vid).join(format!("{n}.jpg")), i as u8 * 40);
        let labels: Vec<u8> = (0..48).map(|p| if p % 8 < 3 { 1 } else if p % 8 > 5 { 2 } else { 0 }).collect();
        write_labels(&root.join("Annotations").join(vid).join(format!("{n}.png")), 8, 6, &labels).unwrap();
    }
    let meta_path = root.join("meta_expressions.json");
    let mut meta: serde_json::Value = std::fs::read_to_string(&meta_path)
        .map(|t| serde_json::from_str(&t).unwrap())
        .unwrap_or_else(|_| json!({"videos": {}}));
    meta["videos"][vid] = json!({"expressions": expressions, "frames": names});
    std::fs::write(meta_path, meta.to_string()).unwrap();
}

#[test]
fn three_expressions_on_one_video_give_three_samples() {
    let dir = tempfile::tempdir().unwrap();
    rvos_video(
        dir.path(),
        "v1",
        json!({
            "0": {"exp": "the left thing", "obj_id": "1"},
            "1": {"exp": "the right thing", "obj_id": 2},
            "2": {"exp": "both things", "obj_id": ["1", "2"]}
        }),
    );
    let ds = Dataset::load(dir.path(), Task::Rvos, &truth_opts()).unwrap();
    assert_eq!(ds.samples.len(), 3);
    assert_eq!(ds.report.loaded, 3);
    let areas: Vec<u64> = ds.samples.iter().map(|s| s.truth.as_ref().unwrap()[0].area()).collect();
    assert_eq!(areas, [18, 12, 30]);
    assert_eq!(ds.samples[0].query, SampleQuery::Text("the left thing".into()));
    assert_eq!(ds.samples[2].id, "v1/2");
}

#[test]
fn missing_frames_and_corrupt_masks_are_itemized() {
    let dir = tempfile::tempdir().unwrap();
    rvos_video(dir.path(), "good", json!({"0": {"exp": "a", "obj_id": "1"}}));
    rvos_video(dir.path(), "noframe", json!({"0": {"exp": "b", "obj_id": "1"}, "1": {"exp": "c", "obj_id": "2"}}));
    std::fs::remove_file(dir.path().join("JPEGImages/noframe/00005.jpg")).unwrap();
    rvos_video(dir.path(), "corrupt", json!({"0": {"exp": "d", "obj_id": "1"}}));
    std::fs::write(dir.path().join("Annotations/corrupt/00010.png"), b"garbage").unwrap();

    let ds = Dataset::load(dir.path(), Task::Rvos, &truth_opts()).unwrap();
    assert_eq!(ds.samples.iter().map(|s| s.id.as_str()).collect::<Vec<_>>(), ["good/0"]);
    let skipped: Vec<&str> = ds.report.skipped.iter().map(|s| s.id.as_str()).collect();
    assert_eq!(skipped, ["corrupt/0", "noframe/0", "noframe/1"]);
    assert!(ds.report.skipped[1].reason.contains("00005"));
    assert!(ds.report.skipped[0].reason.contains("00010.png"));
}

#[test]
fn run_mode_accepts_videos_without_annotations() {
    let dir = tempfile::tempdir().unwrap();
    rvos_video(dir.path(), "v", json!({"0": {"exp": "a", "obj_id": "1"}}));
    std::fs::remove_dir_all(dir.path().join("Annotations")).unwrap();
    let ds = Dataset::load(dir.path(), Task::Rvos, &LoadOptions::default()).unwrap();
    assert_eq!(ds.samples.len(), 1);
    assert!(ds.samples[0].truth.is_none());
    let strict = Dataset::load(dir.path(), Task::Rvos, &truth_opts()).unwrap();
    assert!(strict.samples.is_empty());
    assert_eq!(strict.report.skipped.len(), 1);
}

#[test]
fn run_length_mask_dictionary() {
    let dir = tempfile::tempdir().unwrap();
    rvos_video(dir.path(), "v", json!({"0": {"exp": "two tracks", "obj_id": [1, 2], "anno_id": [7, 8]}}));
    std::fs::remove_dir_all(dir.path().join("Annotations")).unwrap();
    // column-major runs on a 6x8 frame: track 7 covers column 0, track 8 column 7
    let first_col = json!({"size": [6, 8], "counts": [0, 6, 42]});
    let last_col = json!({"size": [6, 8], "counts": [42, 6]});
    std::fs::write(
        dir.path().join("mask_dict.json"),
        json!({"7": [first_col, first_col, null], "8": [last_col, null, null]}).to_string(),
    )
    .unwrap();
    let ds = Dataset::load(dir.path(), Task::Rvos, &truth_opts()).unwrap();
    let truth = ds.samples[0].truth.as_ref().unwrap();
    assert_eq!(truth.iter().map(BinaryMask::area).collect::<Vec<_>>(), [12, 6, 0]);
    assert!(truth[0].get(0, 3) && truth[0].get(7, 3) && !truth[0].get(3, 3));
}

#[test]
fn annotator_grouping_changes_the_mean() {
    let dir = tempfile::tempdir().unwrap();
    rvos_video(
        dir.path(),
        "v",
        json!({
            "0": {"exp": "a", "obj_id": "1", "annotator": 1},
            "1": {"exp": "b", "obj_id": "1", "annotator": 1},
            "2": {"exp": "c", "obj_id": "2", "annotator": 2}
        }),
    );
    let ds = Dataset::load(dir.path(), Task::Rvos, &truth_opts()).unwrap();
    let pred = tempfile::tempdir().unwrap();
    // perfect on the annotator-1 expressions, empty on annotator 2
    for s in &ds.samples[..2] {
        for (n, m) in ds.video_of(s).frame_names.iter().zip(s.truth.as_ref().unwrap()) {
            write_mask(&pred.path().join(&s.id).join(format!("{n}.png")), m).unwrap();
        }
    }
    let pooled = score_predictions(&ds, pred.path(), false).unwrap();
    let grouped = score_predictions(&ds, pred.path(), true).unwrap();
    assert_eq!(pooled.missing.len(), 3);
    assert!((pooled.report.j - 2.0 / 3.0).abs() < 1e-12);
    assert_eq!(grouped.report.j, 0.5);
    assert_eq!(grouped.report.groups.len(), 2);
}

fn avs_video(root: &Path, uid: &str, frames: usize) {
    let dir = root.join(uid);
    for f in 0..frames {
        frame(&dir.join("frames").join(format!("{f}.png")), f as u8);
        write_mask(&dir.join("masks").join(format!("{f}.png")), &BinaryMask::from_fn(6, 8, |x, _| x < 4)).unwrap();
    }
    AudioClip::new(vec![0.0; 100 * frames], 100).unwrap().save_wav(&dir.join("audio.wav")).unwrap();
}

#[test]
fn audio_visual_mini_dataset_with_two_videos() {
    let dir = tempfile::tempdir().unwrap();
    avs_video(dir.path(), "a1", 5);
    avs_video(dir.path(), "b2", 10);
    avs_video(dir.path(), "c3", 5);
    std::fs::write(
        dir.path().join("metadata.csv"),
        "vid,uid,split,label\nx,a1,test,dog\ny,b2,test,dog;piano\nz,c3,train,cat\n",
    )
    .unwrap();
    let opts = LoadOptions {
        require_truth: true,
        split: Some("test".into()),
    };
    let ds = Dataset::load(dir.path(), Task::Avs, &opts).unwrap();
    assert_eq!(ds.samples.len(), 2);
    assert_eq!(ds.samples[1].categories, ["dog", "piano"]);
    assert_eq!(ds.videos[1].frame_names[9], "9");
    assert_eq!(ds.videos[0].fps.as_f64(), 1.0);
    assert_eq!(ds.samples[0].query, SampleQuery::Audio);
}

#[test]
fn audio_visual_missing_audio_is_skipped() {
    let dir = tempfile::tempdir().unwrap();
    avs_video(dir.path(), "a1", 3);
    std::fs::remove_file(dir.path().join("a1/audio.wav")).unwrap();
    std::fs::write(dir.path().join("metadata.csv"), "uid\na1\n").unwrap();
    let ds = Dataset::load(dir.path(), Task::Avs, &LoadOptions::default()).unwrap();
    assert!(ds.samples.is_empty());
    assert!(ds.report.skipped[0].reason.contains("audio.wav"));
}
