//! BOP directory layout:
//!
//! ```text
//! root/models/models_info.json
//! root/models/obj_000001.ply
//! root/000000/scene_camera.json
//! root/000000/scene_gt.json
//! root/000000/scene_gt_info.json      (optional)
//! root/000000/rgb/000000.png
//! root/000000/depth/000000.png        (optional)
//! root/000000/mask_visib/000000_000000.png (optional)
//! ```

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::marker::PhantomData;
use std::path::{Path, PathBuf};

use serde::de::{DeserializeOwned, MapAccess, Visitor};
use serde::{Deserialize, Deserializer, Serialize};

use super::image::{load_depth_png, load_mask_png, save_depth_png, save_mask_png, RgbImage};
use super::mesh::Mesh;
use super::render::render;
use super::{projected_bbox, projected_corners, DataError, ObjectAnnotation, Result, SceneSample};
use crate::anchors::BBox;
use crate::geometry::{Intrinsics, Pose};

#[allow(non_snake_case)]
#[derive(Debug, Clone, Serialize, Deserialize)]
struct CameraRecord {
    cam_K: [f64; 9],
    #[serde(default = "unit_scale")]
    depth_scale: f64,
}

fn unit_scale() -> f64 {
    1.0
}

#[allow(non_snake_case)]
#[derive(Debug, Clone, Serialize, Deserialize)]
struct GtRecord {
    cam_R_m2c: [f64; 9],
    cam_t_m2c: [f64; 3],
    obj_id: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct GtInfoRecord {
    /// `[x, y, width, height]` in pixels.
    bbox_obj: [f64; 4],
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
struct ModelInfo {
    diameter: f64,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    symmetries_discrete: Vec<serde_json::Value>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    symmetries_continuous: Vec<serde_json::Value>,
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    symmetric: bool,
}

pub fn scene_dir(root: &Path, scene_id: usize) -> PathBuf {
    root.join(format!("{scene_id:06}"))
}

/// Reads a JSON object keyed by image id. A failure inside an entry names
/// that entry's key, so truncated files point at the image they stop in.
fn read_image_map<V: DeserializeOwned>(path: &Path) -> Result<BTreeMap<usize, V>> {
    let text = fs::read_to_string(path).map_err(|e| DataError::io(path, e))?;
    let mut de = serde_json::Deserializer::from_str(&text);
    let entries = de
        .deserialize_map(KeyedVisitor::<V>(PhantomData))
        .map_err(|e| split_keyed_error(path, &e.to_string()))?;
    de.end().map_err(|e| DataError::format(path, "<root>", e.to_string()))?;
    let mut out = BTreeMap::new();
    for (key, value) in entries {
        let id = key
            .parse::<usize>()
            .map_err(|_| DataError::format(path, &key, "image id is not a non-negative integer"))?;
        out.insert(id, value);
    }
    Ok(out)
}

const KEY_TAG: &str = "\u{1}";

fn split_keyed_error(path: &Path, msg: &str) -> DataError {
    match msg.split_once(KEY_TAG) {
        Some((key, rest)) => DataError::format(path, key, rest.trim_start_matches(KEY_TAG)),
        None => DataError::format(path, "<root>", msg),
    }
}

struct KeyedVisitor<V>(PhantomData<V>);

impl<'de, V: DeserializeOwned> Visitor<'de> for KeyedVisitor<V> {
    type Value = Vec<(String, V)>;

    fn expecting(&self, f: &mut fmt::Formatter) -> fmt::Result {
        f.write_str("an object keyed by image id")
    }

    fn visit_map<A: MapAccess<'de>>(self, mut map: A) -> std::result::Result<Self::Value, A::Error> {
        use serde::de::Error;
        let mut out = Vec::new();
        loop {
            let key = match map.next_key::<String>() {
                Ok(Some(k)) => k,
                Ok(None) => break,
                Err(e) => {
                    let after = out.last().map_or("<start>".to_string(), |(k, _): &(String, V)| format!("after {k}"));
                    return Err(A::Error::custom(format!("{after}{KEY_TAG}{e}")));
                }
            };
            match map.next_value::<V>() {
                Ok(v) => out.push((key, v)),
                Err(e) => return Err(A::Error::custom(format!("{key}{KEY_TAG}{e}"))),
            }
        }
        Ok(out)
    }
}

fn write_json<S: Serialize>(path: &Path, value: &S) -> Result<()> {
    let text = serde_json::to_string_pretty(value).expect("plain data serialises");
    fs::write(path, text).map_err(|e| DataError::io(path, e))
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| DataError::io(dir, e))
}

/// Loads `models/models_info.json` and the PLY file of every listed object.
pub fn load_bop_models(root: &Path) -> Result<Vec<Mesh>> {
    let dir = root.join("models");
    let info_path = dir.join("models_info.json");
    let info: BTreeMap<usize, ModelInfo> = read_image_map(&info_path)?;
    let mut out = Vec::with_capacity(info.len());
    for (id, i) in info {
        let mut mesh = Mesh::read_ply(&dir.join(format!("obj_{id:06}.ply")), id)?;
        mesh.symmetric = i.symmetric || !i.symmetries_discrete.is_empty() || !i.symmetries_continuous.is_empty();
        out.push(mesh);
    }
    Ok(out)
}

pub fn save_bop_models(root: &Path, meshes: &[Mesh]) -> Result<()> {
    let dir = root.join("models");
    create_dir(&dir)?;
    let mut info = BTreeMap::new();
    for m in meshes {
        m.write_ply(&dir.join(format!("{}.ply", m.name())), false)?;
        info.insert(
            m.class_id,
            ModelInfo {
                diameter: m.diameter,
                symmetric: m.symmetric,
                ..ModelInfo::default()
            },
        );
    }
    write_json(&dir.join("models_info.json"), &info)
}

/// Loads every image of one scene.
///
/// Boxes come from `scene_gt_info.json` when present and from the projected
/// mesh otherwise. Missing masks are rasterised from `meshes`.
pub fn load_bop_scene(root: &Path, scene_id: usize, meshes: &[Mesh]) -> Result<Vec<SceneSample>> {
    let dir = scene_dir(root, scene_id);
    let cam_path = dir.join("scene_camera.json");
    let gt_path = dir.join("scene_gt.json");
    let info_path = dir.join("scene_gt_info.json");
    let cameras: BTreeMap<usize, CameraRecord> = read_image_map(&cam_path)?;
    let gts: BTreeMap<usize, Vec<GtRecord>> = read_image_map(&gt_path)?;
    let infos: Option<BTreeMap<usize, Vec<GtInfoRecord>>> =
        if info_path.exists() { Some(read_image_map(&info_path)?) } else { None };

    let mut out = Vec::with_capacity(gts.len());
    for (&image_id, records) in &gts {
        let key = image_id.to_string();
        let cam = cameras
            .get(&image_id)
            .ok_or_else(|| DataError::format(&cam_path, &key, "no camera entry for this image"))?;
        let intrinsics = Intrinsics::from_matrix(&cam.cam_K);
        if !intrinsics.is_valid() {
            return Err(DataError::format(&cam_path, format!("{key}/cam_K"), "not a pinhole intrinsics matrix"));
        }
        let rgb_path = dir.join("rgb").join(format!("{image_id:06}.png"));
        let rgb = RgbImage::load_png(&rgb_path)?;
        let (width, height) = (rgb.width, rgb.height);

        let depth_path = dir.join("depth").join(format!("{image_id:06}.png"));
        let depth = if depth_path.exists() {
            let (d, w, h) = load_depth_png(&depth_path, cam.depth_scale)?;
            if (w, h) != (width, height) {
                return Err(DataError::format(&depth_path, &key, "depth size differs from rgb"));
            }
            Some(d)
        } else {
            None
        };

        let mut objects = Vec::with_capacity(records.len());
        let mut missing_masks = Vec::new();
        for (j, r) in records.iter().enumerate() {
            let rec_key = format!("{key}/{j}");
            let mesh = meshes
                .iter()
                .find(|m| m.class_id == r.obj_id)
                .ok_or_else(|| DataError::format(&gt_path, format!("{rec_key}/obj_id"), format!("no model for object {}", r.obj_id)))?;
            let pose = Pose::from_rows(&r.cam_R_m2c, &r.cam_t_m2c);
            if !pose.is_valid(1e-4) {
                return Err(DataError::format(&gt_path, format!("{rec_key}/cam_R_m2c"), "not a rotation matrix"));
            }
            let corners = projected_corners(mesh, &pose, &intrinsics)
                .ok_or_else(|| DataError::format(&gt_path, format!("{rec_key}/cam_t_m2c"), "box corner behind the camera"))?;
            let bbox = match infos.as_ref() {
                Some(infos) => {
                    let b = infos
                        .get(&image_id)
                        .and_then(|v| v.get(j))
                        .ok_or_else(|| DataError::format(&info_path, &rec_key, "missing bbox_obj entry"))?
                        .bbox_obj;
                    BBox::new(b[0], b[1], b[0] + b[2], b[1] + b[3])
                }
                None => projected_bbox(mesh, &pose, &intrinsics)
                    .ok_or_else(|| DataError::format(&gt_path, format!("{rec_key}/cam_t_m2c"), "vertex behind the camera"))?,
            };
            let mask_path = dir.join("mask_visib").join(format!("{image_id:06}_{j:06}.png"));
            let mask = if mask_path.exists() {
                let (m, w, h) = load_mask_png(&mask_path)?;
                if (w, h) != (width, height) {
                    return Err(DataError::format(&mask_path, &rec_key, "mask size differs from rgb"));
                }
                m
            } else {
                missing_masks.push(j);
                Vec::new()
            };
            objects.push(ObjectAnnotation {
                class_id: r.obj_id,
                pose,
                bbox,
                mask,
                corners,
            });
        }
        if !missing_masks.is_empty() {
            let scene: Vec<(&Mesh, Pose<f64>)> = objects
                .iter()
                .map(|o| (meshes.iter().find(|m| m.class_id == o.class_id).expect("checked above"), o.pose))
                .collect();
            let r = render(&scene, &intrinsics, RgbImage::new(width, height));
            for j in missing_masks {
                objects[j].mask = r.mask(j);
            }
        }
        out.push(SceneSample {
            scene_id,
            image_id,
            width,
            height,
            intrinsics,
            rgb,
            depth,
            objects,
        });
    }
    Ok(out)
}

/// Writes samples of one scene, including boxes and visible masks.
pub fn save_bop_scene(root: &Path, scene_id: usize, samples: &[SceneSample], depth_scale: f64) -> Result<()> {
    let dir = scene_dir(root, scene_id);
    for sub in ["rgb", "depth", "mask_visib"] {
        create_dir(&dir.join(sub))?;
    }
    let mut cameras = BTreeMap::new();
    let mut gts = BTreeMap::new();
    let mut infos = BTreeMap::new();
    for s in samples {
        cameras.insert(
            s.image_id,
            CameraRecord {
                cam_K: s.intrinsics.to_matrix(),
                depth_scale,
            },
        );
        let mut recs = Vec::new();
        let mut info = Vec::new();
        for (j, o) in s.objects.iter().enumerate() {
            recs.push(GtRecord {
                cam_R_m2c: o.pose.rotation_rows(),
                cam_t_m2c: [o.pose.translation.x, o.pose.translation.y, o.pose.translation.z],
                obj_id: o.class_id,
            });
            info.push(GtInfoRecord {
                bbox_obj: [o.bbox.x1, o.bbox.y1, o.bbox.width(), o.bbox.height()],
            });
            save_mask_png(&dir.join("mask_visib").join(format!("{:06}_{j:06}.png", s.image_id)), &o.mask, s.width, s.height)?;
        }
        gts.insert(s.image_id, recs);
        infos.insert(s.image_id, info);
        s.rgb.save_png(&dir.join("rgb").join(format!("{:06}.png", s.image_id)))?;
        if let Some(d) = &s.depth {
            save_depth_png(&dir.join("depth").join(format!("{:06}.png", s.image_id)), d, s.width, s.height, depth_scale)?;
        }
    }
    write_json(&dir.join("scene_camera.json"), &cameras)?;
    write_json(&dir.join("scene_gt.json"), &gts)?;
    write_json(&dir.join("scene_gt_info.json"), &infos)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::synth::{synth_generate, SynthConfig};
    use nalgebra::{Matrix3, Vector3};

    fn fixture_mesh() -> Mesh {
        Mesh::cuboid(1, [100.0, 80.0, 60.0], 1, [[0.5, 0.5, 0.5]; 6])
    }

    fn write_fixture(root: &Path, gt: &str) {
        let dir = scene_dir(root, 0);
        fs::create_dir_all(dir.join("rgb")).unwrap();
        RgbImage::new(640, 480).save_png(&dir.join("rgb/000000.png")).unwrap();
        RgbImage::new(640, 480).save_png(&dir.join("rgb/000001.png")).unwrap();
        fs::write(
            dir.join("scene_camera.json"),
            r#"{"0": {"cam_K": [572.4, 0.0, 325.3, 0.0, 573.6, 242.0, 0.0, 0.0, 1.0], "depth_scale": 1.0},
                "1": {"cam_K": [572.4, 0.0, 325.3, 0.0, 573.6, 242.0, 0.0, 0.0, 1.0], "depth_scale": 1.0}}"#,
        )
        .unwrap();
        fs::write(dir.join("scene_gt.json"), gt).unwrap();
    }

    const GT: &str = r#"{"0": [{"cam_R_m2c": [1, 0, 0, 0, 1, 0, 0, 0, 1], "cam_t_m2c": [0, 0, 1000], "obj_id": 1}],
        "1": [{"cam_R_m2c": [1, 0, 0, 0, 1, 0, 0, 0, 1], "cam_t_m2c": [10, -5, 900], "obj_id": 1}]}"#;

    #[test]
    fn fixture_parses_verbatim() {
        let dir = tempfile::tempdir().unwrap();
        write_fixture(dir.path(), GT);
        let s = load_bop_scene(dir.path(), 0, &[fixture_mesh()]).unwrap();
        assert_eq!(s.len(), 2);
        let k = s[0].intrinsics;
        assert_eq!((k.fx, k.fy, k.cx, k.cy), (572.4, 573.6, 325.3, 242.0));
        let expected = Pose::new(Matrix3::identity(), Vector3::new(0.0, 0.0, 1000.0));
        assert_eq!(s[0].objects[0].pose, expected);
        assert!(s[0].depth.is_none());
        // Masks were rasterised since none were stored.
        assert!(s[0].objects[0].mask.iter().any(|&m| m));
        assert_eq!(s[0].objects[0].mask.len(), 640 * 480);
    }

    #[test]
    fn truncated_gt_names_the_image() {
        let dir = tempfile::tempdir().unwrap();
        let cut = GT.find("[10").unwrap() + 5;
        write_fixture(dir.path(), &GT[..cut]);
        let err = load_bop_scene(dir.path(), 0, &[fixture_mesh()]).unwrap_err();
        match &err {
            DataError::Format { file, key, .. } => {
                assert!(file.ends_with("scene_gt.json"));
                assert_eq!(key, "1");
            }
            other => panic!("{other}"),
        }
    }

    #[test]
    fn malformed_record_reports_key_path() {
        let dir = tempfile::tempdir().unwrap();
        write_fixture(dir.path(), r#"{"0": [{"cam_R_m2c": [1, 0, 0, 0, 1, 0, 0, 0, 1], "obj_id": 1}]}"#);
        let err = load_bop_scene(dir.path(), 0, &[fixture_mesh()]).unwrap_err().to_string();
        assert!(err.contains("scene_gt.json") && err.contains("cam_t_m2c"), "{err}");

        write_fixture(dir.path(), r#"{"0": [{"cam_R_m2c": [1, 0, 0, 0, 1, 0, 0, 0, 1], "cam_t_m2c": [0, 0, 900], "obj_id": 7}]}"#);
        let err = load_bop_scene(dir.path(), 0, &[fixture_mesh()]).unwrap_err().to_string();
        assert!(err.contains("0/0/obj_id"), "{err}");
    }

    #[test]
    fn missing_file_is_an_io_error() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(load_bop_scene(dir.path(), 3, &[]), Err(DataError::Io { .. })));
    }

    #[test]
    fn generated_scene_roundtrips() {
        let dir = tempfile::tempdir().unwrap();
        let meshes = vec![
            Mesh::cuboid(1, [120.0, 80.0, 60.0], 1, [[0.9, 0.1, 0.1]; 6]),
            Mesh::cuboid(2, [70.0, 70.0, 150.0], 1, [[0.1, 0.1, 0.9]; 6]),
        ];
        let samples = synth_generate(&meshes, 3, &SynthConfig::default(), 4).unwrap();
        save_bop_models(dir.path(), &meshes).unwrap();
        save_bop_scene(dir.path(), 0, &samples, 0.1).unwrap();
        let models = load_bop_models(dir.path()).unwrap();
        assert_eq!(models.len(), 2);
        let back = load_bop_scene(dir.path(), 0, &models).unwrap();
        assert_eq!(back.len(), samples.len());
        for (a, b) in samples.iter().zip(&back) {
            assert_eq!(a.intrinsics, b.intrinsics);
            assert_eq!(a.rgb, b.rgb);
            for (oa, ob) in a.objects.iter().zip(&b.objects) {
                assert_eq!(oa.pose, ob.pose);
                assert_eq!(oa.class_id, ob.class_id);
                assert_eq!(oa.mask, ob.mask);
                assert!((oa.bbox.x2 - ob.bbox.x2).abs() < 1e-9 && (oa.bbox.y2 - ob.bbox.y2).abs() < 1e-9);
                assert_eq!((oa.bbox.x1, oa.bbox.y1), (ob.bbox.x1, ob.bbox.y1));
            }
            let (da, db) = (a.depth.as_ref().unwrap(), b.depth.as_ref().unwrap());
            assert!(da.iter().zip(db).all(|(x, y)| (x - y).abs() <= 0.05 + 1e-3));
        }
    }
}
