//! On-disk dataset layout.
//!
//! ```text
//! category.json            spec, symmetry, instances with split and modes, scene ids
//! manifest.json            sha256 of every other file
//! instances/<id>.ply       NOCS points, with a <id>.feat descriptor sidecar
//! scenes/<id>/partial.ply  camera-space view, with partial.feat
//! scenes/<id>/scene.json   ground truth and rendering parameters
//! ```

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use semshape::io::{read_cloud, write_cloud};
use semshape::seed::derive;
use semshape::synth::{generate_instance, outlier_ids, render_partial, sample_scene, Symmetry};
use semshape::transform::PoseRecord;
use semshape::{Pose, SemanticCloud, Space};

use crate::config::DatasetSpec;
use crate::error::{CliError, CliResult};
use crate::json::{file_hash, read_json, sha256_hex, to_json_bytes, write_bytes, write_json};

pub const CATEGORY_FILE: &str = "category.json";
pub const MANIFEST_FILE: &str = "manifest.json";
/// Salt reserved for the scene stream; instance streams use small salts.
const SCENE_SALT: u64 = u64::MAX;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Test,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InstanceRecord {
    pub id: String,
    pub split: Split,
    pub modes: BTreeMap<String, f64>,
    pub ply: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CategoryRecord {
    pub category_id: String,
    pub symmetry: Symmetry,
    pub spec: DatasetSpec,
    pub instances: Vec<InstanceRecord>,
    pub scenes: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneRecord {
    pub scene_id: String,
    pub category_id: String,
    pub instance_id: String,
    pub gt_pose: PoseRecord,
    pub view_direction: [f64; 3],
    pub sigma: f64,
    pub cull_fraction: f64,
    pub outlier_ids: Vec<usize>,
    pub seed: u64,
}

impl SceneRecord {
    pub fn gt_pose(&self) -> CliResult<Pose> {
        Ok(Pose::try_from(&self.gt_pose)?)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FileEntry {
    pub path: String,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub files: Vec<FileEntry>,
}

fn rel_files(root: &Path, dir: &Path, out: &mut Vec<String>) -> CliResult<()> {
    let mut entries: Vec<_> = fs::read_dir(dir)
        .map_err(|e| CliError::io(dir, e))?
        .collect::<Result<_, _>>()
        .map_err(|e| CliError::io(dir, e))?;
    entries.sort_by_key(|e| e.file_name());
    for e in entries {
        let p = e.path();
        if p.is_dir() {
            rel_files(root, &p, out)?;
        } else {
            let rel = p.strip_prefix(root).expect("under root");
            let rel: Vec<String> = rel
                .components()
                .map(|c| c.as_os_str().to_string_lossy().into_owned())
                .collect();
            out.push(rel.join("/"));
        }
    }
    Ok(())
}

/// Hashes every file under `root` except the manifest itself.
pub fn build_manifest(root: &Path) -> CliResult<Manifest> {
    let mut files = Vec::new();
    rel_files(root, root, &mut files)?;
    files.sort();
    let files = files
        .into_iter()
        .filter(|f| f != MANIFEST_FILE)
        .map(|path| {
            let sha256 = file_hash(&root.join(&path))?;
            Ok(FileEntry { path, sha256 })
        })
        .collect::<CliResult<_>>()?;
    Ok(Manifest { files })
}

/// Moves a finished staging directory to `out`. An existing `out` is only
/// replaced when it is itself a generated directory.
pub fn commit_dir(staging: &Path, out: &Path, marker: &str) -> CliResult<()> {
    if out.exists() {
        let empty = fs::read_dir(out)
            .map_err(|e| CliError::io(out, e))?
            .next()
            .is_none();
        if !empty && !out.join(marker).exists() {
            return Err(CliError::Input(format!(
                "{} exists and was not written by this tool",
                out.display()
            )));
        }
        fs::remove_dir_all(out).map_err(|e| CliError::io(out, e))?;
    }
    if let Some(parent) = out.parent() {
        fs::create_dir_all(parent).map_err(|e| CliError::io(parent, e))?;
    }
    fs::rename(staging, out).map_err(|e| CliError::io(out, e))
}

pub fn staging_path(out: &Path) -> PathBuf {
    let mut name = out
        .file_name()
        .map(|n| n.to_os_string())
        .unwrap_or_else(|| "out".into());
    name.push(".partial");
    out.with_file_name(name)
}

fn scene_dir(id: &str) -> String {
    format!("scenes/{id}")
}

/// Generates the instances and scenes of `spec` into `out`; returns the
/// manifest hash. Nothing is left at `out` on failure.
pub fn generate_dataset(spec: &DatasetSpec, out: &Path) -> CliResult<String> {
    spec.validate()?;
    let staging = staging_path(out);
    if staging.exists() {
        fs::remove_dir_all(&staging).map_err(|e| CliError::io(&staging, e))?;
    }
    let result = write_dataset(spec, &staging);
    if result.is_err() {
        let _ = fs::remove_dir_all(&staging);
    }
    let hash = result?;
    commit_dir(&staging, out, MANIFEST_FILE)?;
    Ok(hash)
}

fn write_dataset(spec: &DatasetSpec, root: &Path) -> CliResult<String> {
    let cat = &spec.category;
    let n = cat.instance_count;
    let first_test = n - spec.held_out;
    let instances = (0..n)
        .into_par_iter()
        .map(|i| generate_instance(cat, i))
        .collect::<semshape::Result<Vec<_>>>()?;
    fs::create_dir_all(root.join("instances")).map_err(|e| CliError::io(root, e))?;
    let names = cat.family.mode_names();
    let mut records = Vec::with_capacity(n);
    for (i, inst) in instances.iter().enumerate() {
        let ply = format!("instances/{}.ply", inst.id);
        write_cloud(root.join(&ply), &inst.cloud)?;
        records.push(InstanceRecord {
            id: inst.id.clone(),
            split: if i < first_test {
                Split::Train
            } else {
                Split::Test
            },
            modes: names
                .iter()
                .map(|s| s.to_string())
                .zip(inst.modes.iter().copied())
                .collect(),
            ply,
        });
    }

    let id = cat.id();
    let scene_seed = derive(cat.seed, SCENE_SALT);
    let scenes = (0..spec.scenes)
        .into_par_iter()
        .map(|s| {
            let inst = &instances[first_test + s % spec.held_out];
            let extents = inst.cloud.extents().expect("non-empty instance");
            let scene = sample_scene(derive(scene_seed, s as u64), &extents, &spec.scene)?;
            let view = render_partial(&inst.cloud, &scene)?;
            let rec = SceneRecord {
                scene_id: format!("{id}_scene_{s:04}"),
                category_id: id.clone(),
                instance_id: inst.id.clone(),
                outlier_ids: outlier_ids(view.len(), &scene),
                gt_pose: scene.gt_pose,
                view_direction: scene.view_direction,
                sigma: scene.noise_sigma,
                cull_fraction: scene.cull_fraction,
                seed: scene.seed,
            };
            Ok((rec, view))
        })
        .collect::<semshape::Result<Vec<_>>>()?;
    for (rec, view) in &scenes {
        let dir = root.join(scene_dir(&rec.scene_id));
        fs::create_dir_all(&dir).map_err(|e| CliError::io(&dir, e))?;
        write_cloud(dir.join("partial.ply"), view)?;
        write_json(&dir.join("scene.json"), rec)?;
    }

    let record = CategoryRecord {
        category_id: id,
        symmetry: cat.symmetry(),
        spec: spec.clone(),
        instances: records,
        scenes: scenes.iter().map(|(r, _)| r.scene_id.clone()).collect(),
    };
    write_json(&root.join(CATEGORY_FILE), &record)?;
    let bytes = to_json_bytes(&build_manifest(root)?);
    write_bytes(&root.join(MANIFEST_FILE), &bytes)?;
    Ok(sha256_hex(&bytes))
}

/// A generated dataset, verified against its manifest on load.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub root: PathBuf,
    pub record: CategoryRecord,
    pub manifest_hash: String,
}

impl Dataset {
    pub fn load(root: &Path) -> CliResult<Self> {
        let mpath = root.join(MANIFEST_FILE);
        let bytes = fs::read(&mpath).map_err(|e| CliError::io(&mpath, e))?;
        let manifest: Manifest = crate::json::parse_json(&mpath, &String::from_utf8_lossy(&bytes))?;
        for f in &manifest.files {
            if file_hash(&root.join(&f.path))? != f.sha256 {
                return Err(CliError::Input(format!(
                    "{}: content does not match the manifest",
                    root.join(&f.path).display()
                )));
            }
        }
        Ok(Self {
            root: root.to_path_buf(),
            record: read_json(&root.join(CATEGORY_FILE))?,
            manifest_hash: sha256_hex(&bytes),
        })
    }

    pub fn category_id(&self) -> &str {
        &self.record.category_id
    }

    pub fn instances(&self, split: Split) -> impl Iterator<Item = &InstanceRecord> {
        self.record
            .instances
            .iter()
            .filter(move |r| r.split == split)
    }

    pub fn instance_cloud(&self, rec: &InstanceRecord) -> CliResult<SemanticCloud> {
        Ok(read_cloud(self.root.join(&rec.ply), Space::Nocs)?)
    }

    pub fn instance_by_id(&self, id: &str) -> CliResult<&InstanceRecord> {
        self.record
            .instances
            .iter()
            .find(|r| r.id == id)
            .ok_or_else(|| {
                CliError::Input(format!("instance `{id}` is not in {}", self.root.display()))
            })
    }

    pub fn scene(&self, id: &str) -> CliResult<SceneRecord> {
        read_json(&self.root.join(scene_dir(id)).join("scene.json"))
    }

    pub fn scene_partial(&self, id: &str) -> CliResult<SemanticCloud> {
        Ok(read_cloud(
            self.root.join(scene_dir(id)).join("partial.ply"),
            Space::Camera,
        )?)
    }
}
