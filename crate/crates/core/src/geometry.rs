//! Pinhole cameras: world→camera extrinsics, pixel rays, projection.
//!
//! Conventions: the extrinsic maps world to camera coordinates, the camera
//! looks down +z, and pixel `(0, 0)` is the top-left corner of the image
//! with +u to the right and +v down. Pixel centers sit at half-integers.

use nalgebra::{Matrix3, Matrix4, Vector3, Vector4};
use thiserror::Error;

const ORTHO_TOL: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum GeometryError {
    #[error("extrinsic rotation is not orthonormal with determinant +1")]
    NotRotation,
    #[error("extrinsic bottom row must be (0, 0, 0, 1)")]
    BottomRow,
    #[error("focal lengths must be positive, got ({0}, {1})")]
    Focal(f64, f64),
    #[error("image size must be non-zero")]
    EmptyImage,
    #[error("pixel ({u}, {v}) outside {width}x{height} image")]
    PixelOutOfRange {
        u: f64,
        v: f64,
        width: u32,
        height: u32,
    },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Intrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Camera {
    extrinsic: Matrix4<f64>,
    intrinsics: Intrinsics,
    width: u32,
    height: u32,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Ray {
    pub origin: Vector3<f64>,
    pub direction: Vector3<f64>,
}

impl Ray {
    pub fn at(&self, s: f64) -> Vector3<f64> {
        self.origin + self.direction * s
    }
}

/// Continuous pixel coordinates plus camera-space depth.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Projection {
    pub u: f64,
    pub v: f64,
    pub depth: f64,
}

impl Camera {
    pub fn new(
        extrinsic: Matrix4<f64>,
        intrinsics: Intrinsics,
        width: u32,
        height: u32,
    ) -> Result<Self, GeometryError> {
        let bottom = extrinsic.row(3);
        if bottom[0] != 0.0 || bottom[1] != 0.0 || bottom[2] != 0.0 || bottom[3] != 1.0 {
            return Err(GeometryError::BottomRow);
        }
        let r: Matrix3<f64> = extrinsic.fixed_view::<3, 3>(0, 0).into();
        let gram = r * r.transpose() - Matrix3::identity();
        if gram.abs().max() > ORTHO_TOL || (r.determinant() - 1.0).abs() > ORTHO_TOL {
            return Err(GeometryError::NotRotation);
        }
        if !(intrinsics.fx > 0.0 && intrinsics.fy > 0.0) {
            return Err(GeometryError::Focal(intrinsics.fx, intrinsics.fy));
        }
        if width == 0 || height == 0 {
            return Err(GeometryError::EmptyImage);
        }
        Ok(Self {
            extrinsic,
            intrinsics,
            width,
            height,
        })
    }

    /// From 16 row-major extrinsic values.
    pub fn from_row_major(
        values: &[f64; 16],
        intrinsics: Intrinsics,
        width: u32,
        height: u32,
    ) -> Result<Self, GeometryError> {
        Self::new(Matrix4::from_row_slice(values), intrinsics, width, height)
    }

    /// Camera at `eye` looking at `target`, image rows running along `-up`.
    pub fn look_at(
        eye: Vector3<f64>,
        target: Vector3<f64>,
        up: Vector3<f64>,
        intrinsics: Intrinsics,
        width: u32,
        height: u32,
    ) -> Result<Self, GeometryError> {
        let z = (target - eye).normalize();
        let x = (-up).cross(&z).normalize();
        let y = z.cross(&x);
        let r = Matrix3::from_rows(&[x.transpose(), y.transpose(), z.transpose()]);
        let t = -(r * eye);
        let mut m = Matrix4::identity();
        m.fixed_view_mut::<3, 3>(0, 0).copy_from(&r);
        m.fixed_view_mut::<3, 1>(0, 3).copy_from(&t);
        Self::new(m, intrinsics, width, height)
    }

    pub fn extrinsic(&self) -> &Matrix4<f64> {
        &self.extrinsic
    }

    pub fn extrinsic_row_major(&self) -> [f64; 16] {
        let mut out = [0.0; 16];
        for r in 0..4 {
            for c in 0..4 {
                out[4 * r + c] = self.extrinsic[(r, c)];
            }
        }
        out
    }

    pub fn intrinsics(&self) -> Intrinsics {
        self.intrinsics
    }

    pub fn width(&self) -> u32 {
        self.width
    }

    pub fn height(&self) -> u32 {
        self.height
    }

    pub fn rotation(&self) -> Matrix3<f64> {
        self.extrinsic.fixed_view::<3, 3>(0, 0).into()
    }

    pub fn translation(&self) -> Vector3<f64> {
        self.extrinsic.fixed_view::<3, 1>(0, 3).into()
    }

    pub fn to_camera(&self, x_world: &Vector3<f64>) -> Vector3<f64> {
        self.rotation() * x_world + self.translation()
    }

    pub fn project(&self, x_world: &Vector3<f64>) -> Projection {
        let p = self.to_camera(x_world);
        let Intrinsics { fx, fy, cx, cy } = self.intrinsics;
        Projection {
            u: fx * p.x / p.z + cx,
            v: fy * p.y / p.z + cy,
            depth: p.z,
        }
    }

    /// Whether a projection lands inside the image and in front of the camera.
    pub fn sees(&self, p: &Projection) -> bool {
        p.depth > 0.0
            && p.u >= 0.0
            && p.v >= 0.0
            && p.u < self.width as f64
            && p.v < self.height as f64
    }

    /// Camera center in world coordinates, `-Rᵀt`.
    pub fn center(&self) -> Vector3<f64> {
        -(self.rotation().transpose() * self.translation())
    }

    pub fn view_direction(&self, x_world: &Vector3<f64>) -> Vector3<f64> {
        (x_world - self.center()).normalize()
    }

    /// World-space ray through continuous pixel coordinates `(u, v)`.
    pub fn pixel_ray(&self, u: f64, v: f64) -> Result<Ray, GeometryError> {
        let in_range = (0.0..self.width as f64).contains(&u) && (0.0..self.height as f64).contains(&v);
        if !in_range {
            return Err(GeometryError::PixelOutOfRange {
                u,
                v,
                width: self.width,
                height: self.height,
            });
        }
        let Intrinsics { fx, fy, cx, cy } = self.intrinsics;
        let d_cam = Vector3::new((u - cx) / fx, (v - cy) / fy, 1.0);
        Ok(Ray {
            origin: self.center(),
            direction: (self.rotation().transpose() * d_cam).normalize(),
        })
    }

    /// Ray through the center of pixel `(col, row)`.
    pub fn pixel_center_ray(&self, col: u32, row: u32) -> Result<Ray, GeometryError> {
        self.pixel_ray(col as f64 + 0.5, row as f64 + 0.5)
    }

    /// Homogeneous 4×4 multiply, used as an independent projection route.
    pub fn project_homogeneous(&self, x_world: &Vector3<f64>) -> Projection {
        let Intrinsics { fx, fy, cx, cy } = self.intrinsics;
        let k = Matrix4::new(
            fx, 0.0, cx, 0.0, //
            0.0, fy, cy, 0.0, //
            0.0, 0.0, 1.0, 0.0, //
            0.0, 0.0, 0.0, 1.0,
        );
        let h = k * self.extrinsic * Vector4::new(x_world.x, x_world.y, x_world.z, 1.0);
        Projection {
            u: h.x / h.z,
            v: h.y / h.z,
            depth: h.z,
        }
    }
}

/// Intrinsics whose field of view spans `half_extent` world units at
/// `distance` on both image axes.
pub fn framing_intrinsics(width: u32, height: u32, distance: f64, half_extent: f64) -> Intrinsics {
    let f = 0.5 * width.min(height) as f64 * distance / half_extent;
    Intrinsics {
        fx: f,
        fy: f,
        cx: 0.5 * width as f64,
        cy: 0.5 * height as f64,
    }
}

/// `n` cameras evenly spaced on a horizontal ring around the origin, all
/// looking at it. World up is +y; `elevation` is in radians.
pub fn ring_cameras(
    n: usize,
    radius: f64,
    elevation: f64,
    phase: f64,
    intrinsics: Intrinsics,
    width: u32,
    height: u32,
) -> Result<Vec<Camera>, GeometryError> {
    (0..n)
        .map(|i| {
            let az = phase + std::f64::consts::TAU * i as f64 / n as f64;
            let eye = Vector3::new(
                radius * elevation.cos() * az.cos(),
                radius * elevation.sin(),
                radius * elevation.cos() * az.sin(),
            );
            Camera::look_at(eye, Vector3::zeros(), Vector3::y(), intrinsics, width, height)
        })
        .collect()
}
