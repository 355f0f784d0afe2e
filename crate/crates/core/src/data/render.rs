use nalgebra::Vector3;

use super::image::RgbImage;
use super::mesh::Mesh;
use crate::geometry::{Intrinsics, Pose};

const NEAR_MM: f64 = 1.0;
const AMBIENT: f64 = 0.35;
const DEFAULT_COLOR: [f32; 3] = [0.7, 0.7, 0.7];

/// Output of [`render`]. Buffers are row-major with one entry per pixel.
#[derive(Debug, Clone)]
pub struct Rendering {
    pub rgb: RgbImage,
    /// Camera-frame depth in millimetres, 0 where nothing was drawn.
    pub depth: Vec<f32>,
    /// Index of the visible object, -1 for background.
    pub index: Vec<i32>,
}

impl Rendering {
    /// Pixels where object `i` is the closest surface.
    pub fn mask(&self, i: usize) -> Vec<bool> {
        self.index.iter().map(|&j| j == i as i32).collect()
    }
}

/// Flat-shaded z-buffer rasterisation of posed meshes over `background`.
///
/// Pixel `(x, y)` samples the point `(x, y)` of the image plane. Faces are
/// lit by a headlight: ambient plus the cosine between the face normal and
/// the viewing ray.
pub fn render(objects: &[(&Mesh, Pose<f64>)], k: &Intrinsics<f64>, background: RgbImage) -> Rendering {
    let (w, h) = (background.width, background.height);
    let mut out = Rendering {
        rgb: background,
        depth: vec![0.0; w * h],
        index: vec![-1; w * h],
    };
    let mut zbuf = vec![f64::INFINITY; w * h];
    for (oi, (mesh, pose)) in objects.iter().enumerate() {
        let cam: Vec<Vector3<f64>> = mesh.vertices.iter().map(|v| pose.transform(v)).collect();
        for face in &mesh.faces {
            let [a, b, c] = face.map(|i| cam[i as usize]);
            if a.z < NEAR_MM || b.z < NEAR_MM || c.z < NEAR_MM {
                continue;
            }
            let normal = (b - a).cross(&(c - a));
            let centroid = (a + b + c) / 3.0;
            let nn = normal.norm();
            if nn == 0.0 {
                continue;
            }
            let cos = (normal.dot(&centroid) / (nn * centroid.norm())).abs();
            let shade = (AMBIENT + (1.0 - AMBIENT) * cos) as f32;
            let base = if mesh.colors.len() == mesh.vertices.len() {
                let cs = face.map(|i| mesh.colors[i as usize]);
                [0, 1, 2].map(|ch| (cs[0][ch] + cs[1][ch] + cs[2][ch]) / 3.0)
            } else {
                DEFAULT_COLOR
            };
            let color = base.map(|v| (v * shade).clamp(0.0, 1.0));
            let p = [a, b, c].map(|v| (k.fx * v.x / v.z + k.cx, k.fy * v.y / v.z + k.cy, 1.0 / v.z));
            let area = edge(p[0], p[1], p[2].0, p[2].1);
            if area == 0.0 {
                continue;
            }
            let min_x = p.iter().map(|q| q.0).fold(f64::INFINITY, f64::min).ceil().max(0.0);
            let max_x = p.iter().map(|q| q.0).fold(f64::NEG_INFINITY, f64::max).floor().min(w as f64 - 1.0);
            let min_y = p.iter().map(|q| q.1).fold(f64::INFINITY, f64::min).ceil().max(0.0);
            let max_y = p.iter().map(|q| q.1).fold(f64::NEG_INFINITY, f64::max).floor().min(h as f64 - 1.0);
            if min_x > max_x || min_y > max_y {
                continue;
            }
            for y in min_y as usize..=max_y as usize {
                for x in min_x as usize..=max_x as usize {
                    let (fx, fy) = (x as f64, y as f64);
                    let w0 = edge(p[1], p[2], fx, fy) / area;
                    let w1 = edge(p[2], p[0], fx, fy) / area;
                    let w2 = edge(p[0], p[1], fx, fy) / area;
                    if w0 < 0.0 || w1 < 0.0 || w2 < 0.0 {
                        continue;
                    }
                    let z = 1.0 / (w0 * p[0].2 + w1 * p[1].2 + w2 * p[2].2);
                    let i = y * w + x;
                    if z < zbuf[i] {
                        zbuf[i] = z;
                        out.depth[i] = z as f32;
                        out.index[i] = oi as i32;
                        out.rgb.data[3 * i..3 * i + 3].copy_from_slice(&color);
                    }
                }
            }
        }
    }
    out
}

fn edge(a: (f64, f64, f64), b: (f64, f64, f64), x: f64, y: f64) -> f64 {
    (b.0 - a.0) * (y - a.1) - (b.1 - a.1) * (x - a.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::Matrix3;

    fn cube() -> Mesh {
        Mesh::cuboid(1, [100.0, 100.0, 100.0], 1, [[1.0, 0.0, 0.0]; 6])
    }

    #[test]
    fn frontal_square_covers_expected_pixels() {
        let k = Intrinsics::new(100.0, 100.0, 32.0, 32.0);
        let pose = Pose::new(Matrix3::identity(), Vector3::new(0.0, 0.0, 1050.0));
        let mesh = cube();
        let r = render(&[(&mesh, pose)], &k, RgbImage::new(64, 64));
        // Front face at z = 1000 spans [-50, 50] mm, i.e. 5 px around the centre.
        let mask = r.mask(0);
        for y in 0..64 {
            for x in 0..64 {
                let inside = (27..=37).contains(&x) && (27..=37).contains(&y);
                assert_eq!(mask[y * 64 + x], inside, "({x}, {y})");
            }
        }
        assert!((r.depth[32 * 64 + 32] - 1000.0).abs() < 1e-3);
        // Head-on face is fully lit.
        assert!((r.rgb.pixel(32, 32)[0] - 1.0).abs() < 1e-3);
    }

    #[test]
    fn nearer_object_occludes() {
        let k = Intrinsics::new(100.0, 100.0, 32.0, 32.0);
        let mesh = cube();
        let far = Pose::new(Matrix3::identity(), Vector3::new(0.0, 0.0, 2000.0));
        let near = Pose::new(Matrix3::identity(), Vector3::new(0.0, 0.0, 1000.0));
        let r = render(&[(&mesh, far), (&mesh, near)], &k, RgbImage::new(64, 64));
        assert_eq!(r.index[32 * 64 + 32], 1);
        let r = render(&[(&mesh, near), (&mesh, far)], &k, RgbImage::new(64, 64));
        assert_eq!(r.index[32 * 64 + 32], 0);
    }

    #[test]
    fn depth_is_perspective_correct() {
        let k = Intrinsics::new(200.0, 200.0, 32.0, 32.0);
        let mesh = cube();
        let pose = Pose::from_axis_angle(Vector3::new(0.0, 0.7, 0.0), Vector3::new(0.0, 0.0, 900.0));
        let r = render(&[(&mesh, pose)], &k, RgbImage::new(64, 64));
        for y in 0..64 {
            for x in 0..64 {
                let i = y * 64 + x;
                if r.index[i] < 0 {
                    continue;
                }
                // The back-projected point lies on the cube surface.
                let p = k.backproject(x as f64, y as f64, r.depth[i] as f64);
                let q = pose.inverse().transform(&p);
                let on_face = q.iter().map(|c| c.abs()).fold(0.0, f64::max);
                assert!((on_face - 50.0).abs() < 0.01, "{q:?}");
            }
        }
    }
}
