//! On-disk dataset layout:
//!
//! ```text
//! <root>/manifest.json
//! <root>/{source,target}/{train,test}/images/NNNNN.ppm
//! <root>/{source,target}/{train,test}/annotations.json
//! <root>/target/{train,test}/eval_boxes.json   (evaluation-only boxes)
//! ```

use super::ppm::{read_ppm, write_ppm};
use super::scene::{
    apply_domain_shift, generate_scene, Image, PixelBox, Sample, SceneSpec, ShiftConfig,
};
use crate::backbone::Domain;
use crate::error::{Error, Result};
use crate::par;
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};

#[derive(Clone, Copy, PartialEq, Eq, Debug, Serialize, Deserialize)]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub fn dir_name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }
}

fn domain_dir(domain: Domain) -> &'static str {
    match domain {
        Domain::Source => "source",
        Domain::Target => "target",
    }
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize, PartialEq, Eq)]
pub struct SplitCounts {
    pub source_train: usize,
    pub source_test: usize,
    pub target_train: usize,
    pub target_test: usize,
}

impl SplitCounts {
    fn get(&self, domain: Domain, split: Split) -> usize {
        match (domain, split) {
            (Domain::Source, Split::Train) => self.source_train,
            (Domain::Source, Split::Test) => self.source_test,
            (Domain::Target, Split::Train) => self.target_train,
            (Domain::Target, Split::Test) => self.target_test,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct DatasetManifest {
    pub format_version: u32,
    pub spec: SceneSpec,
    pub shift: ShiftConfig,
    pub counts: SplitCounts,
}

#[derive(Serialize, Deserialize)]
struct AnnotationFile {
    domain: Domain,
    split: Split,
    image_size: usize,
    class_count: usize,
    samples: Vec<AnnotationRecord>,
}

#[derive(Serialize, Deserialize)]
struct AnnotationRecord {
    id: usize,
    image: String,
    tags: Vec<u8>,
    #[serde(skip_serializing_if = "Option::is_none")]
    boxes: Option<Vec<PixelBox>>,
}

#[derive(Serialize, Deserialize)]
struct EvalBoxFile {
    samples: Vec<EvalBoxRecord>,
}

#[derive(Serialize, Deserialize)]
struct EvalBoxRecord {
    id: usize,
    boxes: Vec<PixelBox>,
}

fn write_json<S: Serialize>(path: &Path, value: &S) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn read_json<D: serde::de::DeserializeOwned>(path: &Path) -> Result<D> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_str(&text)?)
}

fn generate_split(
    spec: &SceneSpec,
    shift: &ShiftConfig,
    domain: Domain,
    split: Split,
    count: usize,
) -> Result<Vec<Sample>> {
    let stream = format!("{}/{}", domain_dir(domain), split.dir_name());
    let samples = par::par_map_range(count, |i| {
        generate_scene(spec, &stream, i).map(|s| match domain {
            Domain::Source => s,
            Domain::Target => apply_domain_shift(&s, shift, spec.image_size),
        })
    });
    samples.into_iter().collect()
}

/// Writes the whole dataset; a pure function of (spec, shift, counts).
pub fn dataset_build(
    root: &Path,
    spec: &SceneSpec,
    shift: &ShiftConfig,
    counts: &SplitCounts,
) -> Result<DatasetManifest> {
    spec.validate()?;
    if [counts.source_train, counts.source_test, counts.target_train, counts.target_test]
        .iter()
        .any(|&c| c == 0)
    {
        return Err(Error::contract("every split needs at least one sample"));
    }
    for domain in [Domain::Source, Domain::Target] {
        for split in [Split::Train, Split::Test] {
            let dir = root.join(domain_dir(domain)).join(split.dir_name());
            let images = dir.join("images");
            std::fs::create_dir_all(&images).map_err(|e| Error::io(&images, e))?;
            let samples = generate_split(spec, shift, domain, split, counts.get(domain, split))?;
            let mut records = Vec::with_capacity(samples.len());
            let mut eval_records = Vec::with_capacity(samples.len());
            for s in &samples {
                let name = format!("images/{:05}.ppm", s.id);
                write_ppm(&dir.join(&name), &s.image)?;
                records.push(AnnotationRecord {
                    id: s.id,
                    image: name,
                    tags: s.tags.iter().map(|&t| u8::from(t)).collect(),
                    boxes: s.boxes.clone(),
                });
                eval_records.push(EvalBoxRecord {
                    id: s.id,
                    boxes: s.eval_boxes.clone(),
                });
            }
            write_json(
                &dir.join("annotations.json"),
                &AnnotationFile {
                    domain,
                    split,
                    image_size: spec.image_size,
                    class_count: spec.class_count,
                    samples: records,
                },
            )?;
            if domain == Domain::Target {
                write_json(&dir.join("eval_boxes.json"), &EvalBoxFile { samples: eval_records })?;
            }
        }
    }
    let manifest = DatasetManifest {
        format_version: 1,
        spec: spec.clone(),
        shift: shift.clone(),
        counts: *counts,
    };
    write_json(&root.join("manifest.json"), &manifest)?;
    Ok(manifest)
}

pub fn load_manifest(root: &Path) -> Result<DatasetManifest> {
    read_json(&root.join("manifest.json"))
}

/// One sample as read back from disk. `eval_boxes` come from the
/// annotation boxes on the source side and the quarantined file on the
/// target side.
#[derive(Clone, Debug)]
pub struct LoadedSample {
    pub id: usize,
    pub domain: Domain,
    pub image: Image,
    pub tags: Vec<bool>,
    pub boxes: Option<Vec<PixelBox>>,
    pub eval_boxes: Vec<PixelBox>,
}

pub fn load_split(root: &Path, domain: Domain, split: Split) -> Result<Vec<LoadedSample>> {
    let dir = root.join(domain_dir(domain)).join(split.dir_name());
    let ann: AnnotationFile = read_json(&dir.join("annotations.json"))?;
    let eval: Option<EvalBoxFile> = if domain == Domain::Target {
        Some(read_json(&dir.join("eval_boxes.json"))?)
    } else {
        None
    };
    let mut out = Vec::with_capacity(ann.samples.len());
    for (i, rec) in ann.samples.into_iter().enumerate() {
        let image = read_ppm(&dir.join(&rec.image))?;
        let eval_boxes = match &eval {
            Some(file) => {
                let er = file
                    .samples
                    .get(i)
                    .filter(|er| er.id == rec.id)
                    .ok_or_else(|| Error::contract(format!("eval boxes missing for id {}", rec.id)))?;
                er.boxes.clone()
            }
            None => rec.boxes.clone().unwrap_or_default(),
        };
        out.push(LoadedSample {
            id: rec.id,
            domain: ann.domain,
            image,
            tags: rec.tags.iter().map(|&t| t != 0).collect(),
            boxes: rec.boxes,
            eval_boxes,
        });
    }
    Ok(out)
}

/// Absolute paths of every file a split contributes, for diffing.
pub fn split_files(root: &Path, domain: Domain, split: Split) -> Result<Vec<PathBuf>> {
    let dir = root.join(domain_dir(domain)).join(split.dir_name());
    let mut files = vec![dir.join("annotations.json")];
    if domain == Domain::Target {
        files.push(dir.join("eval_boxes.json"));
    }
    let images = dir.join("images");
    let mut names: Vec<PathBuf> = std::fs::read_dir(&images)
        .map_err(|e| Error::io(&images, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .collect();
    names.sort();
    files.extend(names);
    Ok(files)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_counts() -> SplitCounts {
        SplitCounts {
            source_train: 4,
            source_test: 2,
            target_train: 4,
            target_test: 2,
        }
    }

    fn build_tmp(tag: &str) -> (PathBuf, DatasetManifest) {
        let root = std::env::temp_dir().join(format!("detq_dataset_{tag}"));
        let _ = std::fs::remove_dir_all(&root);
        let spec = SceneSpec::default();
        let manifest =
            dataset_build(&root, &spec, &ShiftConfig::default(), &tiny_counts()).unwrap();
        (root, manifest)
    }

    #[test]
    fn manifest_round_trip_rebuilds_bit_identical() {
        let (root_a, manifest) = build_tmp("a");
        let loaded = load_manifest(&root_a).unwrap();
        assert_eq!(loaded, manifest);

        let root_b = std::env::temp_dir().join("detq_dataset_b");
        let _ = std::fs::remove_dir_all(&root_b);
        dataset_build(&root_b, &loaded.spec, &loaded.shift, &loaded.counts).unwrap();
        for domain in [Domain::Source, Domain::Target] {
            for split in [Split::Train, Split::Test] {
                let fa = split_files(&root_a, domain, split).unwrap();
                let fb = split_files(&root_b, domain, split).unwrap();
                assert_eq!(fa.len(), fb.len());
                for (a, b) in fa.iter().zip(&fb) {
                    assert_eq!(
                        std::fs::read(a).unwrap(),
                        std::fs::read(b).unwrap(),
                        "{} differs",
                        a.display()
                    );
                }
            }
        }
    }

    #[test]
    fn source_has_boxes_target_does_not() {
        let (root, _) = build_tmp("c");
        let src = load_split(&root, Domain::Source, Split::Train).unwrap();
        assert!(src.iter().all(|s| s.boxes.is_some()));
        let tgt = load_split(&root, Domain::Target, Split::Train).unwrap();
        assert!(tgt.iter().all(|s| s.boxes.is_none()));
        // Hidden boxes are still available for evaluation.
        assert!(tgt.iter().all(|s| !s.eval_boxes.is_empty()));
    }

    #[test]
    fn split_sizes_match_manifest() {
        let (root, manifest) = build_tmp("d");
        for (domain, split, expect) in [
            (Domain::Source, Split::Train, manifest.counts.source_train),
            (Domain::Source, Split::Test, manifest.counts.source_test),
            (Domain::Target, Split::Train, manifest.counts.target_train),
            (Domain::Target, Split::Test, manifest.counts.target_test),
        ] {
            assert_eq!(load_split(&root, domain, split).unwrap().len(), expect);
        }
    }
}
