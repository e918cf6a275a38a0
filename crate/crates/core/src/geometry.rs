//! Pinhole cameras, rays, and feature-map fetching. Conventions, fixed
//! everywhere: camera frame is x_cam = R * x_world + t with the view
//! direction along +z; pixel origin is the top-left corner and pixel centers
//! sit at integer coordinates, so the valid continuous range is
//! [0, width-1] x [0, height-1]. An out-of-frame or behind-camera projection
//! is data (valid = false), never an error.
//!
//! Geometry runs in f64. Gradients never flow through projections (sample
//! positions are fixed by the time features are fetched), so precision here
//! buys pixel-accurate round trips at no cost to the training hot path.

use nalgebra::{Matrix3, Vector3};

use crate::tensorio::{CameraRecord, Scalar, Tensor};

const MIN_DEPTH: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq)]
pub struct Camera {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
    /// world-to-camera rotation
    pub r: Matrix3<f64>,
    pub t: Vector3<f64>,
}

#[derive(Debug, Clone, Copy)]
pub struct Ray {
    pub origin: Vector3<f64>,
    /// unit length
    pub dir: Vector3<f64>,
}

impl Ray {
    pub fn at(&self, t: f64) -> Vector3<f64> {
        self.origin + self.dir * t
    }
}

/// Projection of a world point. `depth` is camera-frame z, defined whenever
/// the point is in front of the camera; `valid` additionally requires the
/// pixel to land inside the frame.
#[derive(Debug, Clone, Copy)]
pub struct Projection {
    pub u: f64,
    pub v: f64,
    pub depth: f64,
    pub valid: bool,
}

impl Camera {
    pub fn look_at(
        eye: Vector3<f64>,
        center: Vector3<f64>,
        up: Vector3<f64>,
        fx: f64,
        fy: f64,
        width: usize,
        height: usize,
    ) -> Camera {
        let z = (center - eye).normalize();
        let x = z.cross(&up);
        let xn = x.norm();
        assert!(xn > 1e-9, "view direction parallel to up");
        let x = x / xn;
        let y = z.cross(&x);
        let r = Matrix3::from_rows(&[x.transpose(), y.transpose(), z.transpose()]);
        let t = -r * eye;
        Camera {
            fx,
            fy,
            cx: (width as f64 - 1.0) / 2.0,
            cy: (height as f64 - 1.0) / 2.0,
            width,
            height,
            r,
            t,
        }
    }

    pub fn center(&self) -> Vector3<f64> {
        -(self.r.transpose() * self.t)
    }

    pub fn project(&self, x: &Vector3<f64>) -> Projection {
        let c = self.r * x + self.t;
        if c.z <= MIN_DEPTH {
            return Projection {
                u: f64::NAN,
                v: f64::NAN,
                depth: c.z,
                valid: false,
            };
        }
        let u = self.fx * c.x / c.z + self.cx;
        let v = self.fy * c.y / c.z + self.cy;
        let in_frame = u >= 0.0
            && u <= (self.width - 1) as f64
            && v >= 0.0
            && v <= (self.height - 1) as f64;
        Projection {
            u,
            v,
            depth: c.z,
            valid: in_frame,
        }
    }

    /// Ray through the continuous pixel position (u, v).
    pub fn ray_for_pixel(&self, u: f64, v: f64) -> Ray {
        let d_cam = Vector3::new((u - self.cx) / self.fx, (v - self.cy) / self.fy, 1.0);
        let dir = (self.r.transpose() * d_cam).normalize();
        Ray {
            origin: self.center(),
            dir,
        }
    }

    /// Camera-frame depth (z) of a world point.
    pub fn depth_of(&self, x: &Vector3<f64>) -> f64 {
        (self.r * x + self.t).z
    }

    /// World point seen at pixel (u, v) with camera-frame depth z.
    pub fn unproject_depth(&self, u: f64, v: f64, z: f64) -> Vector3<f64> {
        let c = Vector3::new((u - self.cx) / self.fx * z, (v - self.cy) / self.fy * z, z);
        self.r.transpose() * (c - self.t)
    }

    pub fn to_record(&self) -> CameraRecord {
        let mut r = [0.0; 9];
        for i in 0..3 {
            for j in 0..3 {
                r[i * 3 + j] = self.r[(i, j)];
            }
        }
        CameraRecord {
            fx: self.fx,
            fy: self.fy,
            cx: self.cx,
            cy: self.cy,
            width: self.width,
            height: self.height,
            r,
            t: [self.t.x, self.t.y, self.t.z],
        }
    }

    pub fn from_record(rec: &CameraRecord) -> Camera {
        Camera {
            fx: rec.fx,
            fy: rec.fy,
            cx: rec.cx,
            cy: rec.cy,
            width: rec.width,
            height: rec.height,
            r: Matrix3::from_row_slice(&rec.r),
            t: Vector3::new(rec.t[0], rec.t[1], rec.t[2]),
        }
    }
}

/// One texel of a fetch: flat pixel index (y * width + x) and its weight.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Tap {
    pub index: usize,
    pub weight: f64,
}

/// Bilinear footprint of (u, v) on a width x height grid, None when out of
/// the valid range. Weights are nonnegative and sum to 1.
pub fn bilinear_taps(width: usize, height: usize, u: f64, v: f64) -> Option<[Tap; 4]> {
    if !(u >= 0.0 && u <= (width - 1) as f64 && v >= 0.0 && v <= (height - 1) as f64) {
        return None;
    }
    let x0 = (u.floor() as usize).min(width - 1);
    let y0 = (v.floor() as usize).min(height - 1);
    let x1 = (x0 + 1).min(width - 1);
    let y1 = (y0 + 1).min(height - 1);
    let fu = u - x0 as f64;
    let fv = v - y0 as f64;
    Some([
        Tap {
            index: y0 * width + x0,
            weight: (1.0 - fu) * (1.0 - fv),
        },
        Tap {
            index: y0 * width + x1,
            weight: fu * (1.0 - fv),
        },
        Tap {
            index: y1 * width + x0,
            weight: (1.0 - fu) * fv,
        },
        Tap {
            index: y1 * width + x1,
            weight: fu * fv,
        },
    ])
}

/// Single-texel footprint at the nearest pixel, same validity rule.
pub fn nearest_tap(width: usize, height: usize, u: f64, v: f64) -> Option<Tap> {
    if !(u >= 0.0 && u <= (width - 1) as f64 && v >= 0.0 && v <= (height - 1) as f64) {
        return None;
    }
    let x = (u.round() as usize).min(width - 1);
    let y = (v.round() as usize).min(height - 1);
    Some(Tap {
        index: y * width + x,
        weight: 1.0,
    })
}

/// Bilinear fetch from an [H, W, C] map. None when (u, v) is out of range.
pub fn fetch_bilinear<S: Scalar>(map: &Tensor<S>, u: f64, v: f64) -> Option<Vec<S>> {
    assert_eq!(map.rank(), 3, "expected [H, W, C] map");
    let (h, w, c) = (map.dim(0), map.dim(1), map.dim(2));
    let taps = bilinear_taps(w, h, u, v)?;
    let data = map.data();
    let mut out = vec![S::ZERO; c];
    for tap in taps {
        let base = tap.index * c;
        let wgt = S::from_f64(tap.weight);
        for (o, &m) in out.iter_mut().zip(&data[base..base + c]) {
            *o += m * wgt;
        }
    }
    Some(out)
}

/// Nearest-texel fetch from an [H, W, C] map.
pub fn fetch_nearest<S: Scalar>(map: &Tensor<S>, u: f64, v: f64) -> Option<Vec<S>> {
    assert_eq!(map.rank(), 3, "expected [H, W, C] map");
    let (h, w, c) = (map.dim(0), map.dim(1), map.dim(2));
    let tap = nearest_tap(w, h, u, v)?;
    Some(map.data()[tap.index * c..tap.index * c + c].to_vec())
}
