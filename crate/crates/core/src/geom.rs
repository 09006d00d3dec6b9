//! Small fixed-size linear algebra: 3-vectors and 3×3 matrices.

use std::ops::{Add, AddAssign, Index, Mul, Neg, Sub, SubAssign};

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::real::Real;

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct Vector3<T> {
    pub x: T,
    pub y: T,
    pub z: T,
}

impl<T: Real> Vector3<T> {
    #[inline]
    pub const fn new(x: T, y: T, z: T) -> Self {
        Self { x, y, z }
    }

    #[inline]
    pub fn zeros() -> Self {
        Self::new(T::zero(), T::zero(), T::zero())
    }

    #[inline]
    pub fn splat(v: T) -> Self {
        Self::new(v, v, v)
    }

    pub fn unit_x() -> Self {
        Self::new(T::one(), T::zero(), T::zero())
    }

    pub fn unit_y() -> Self {
        Self::new(T::zero(), T::one(), T::zero())
    }

    pub fn unit_z() -> Self {
        Self::new(T::zero(), T::zero(), T::one())
    }

    #[inline]
    pub fn from_array(a: [T; 3]) -> Self {
        Self::new(a[0], a[1], a[2])
    }

    #[inline]
    pub fn to_array(self) -> [T; 3] {
        [self.x, self.y, self.z]
    }

    #[inline]
    pub fn dot(self, o: Self) -> T {
        self.x * o.x + self.y * o.y + self.z * o.z
    }

    #[inline]
    pub fn cross(self, o: Self) -> Self {
        Self::new(
            self.y * o.z - self.z * o.y,
            self.z * o.x - self.x * o.z,
            self.x * o.y - self.y * o.x,
        )
    }

    #[inline]
    pub fn norm_squared(self) -> T {
        self.dot(self)
    }

    #[inline]
    pub fn norm(self) -> T {
        self.norm_squared().sqrt()
    }

    /// Unit vector in the same direction. Zero vectors are returned unchanged.
    #[inline]
    pub fn normalize(self) -> Self {
        let n = self.norm();
        if n > T::zero() {
            self * (T::one() / n)
        } else {
            self
        }
    }

    #[inline]
    pub fn distance(self, o: Self) -> T {
        (self - o).norm()
    }

    #[inline]
    pub fn component_mul(self, o: Self) -> Self {
        Self::new(self.x * o.x, self.y * o.y, self.z * o.z)
    }

    #[inline]
    pub fn component_div(self, o: Self) -> Self {
        Self::new(self.x / o.x, self.y / o.y, self.z / o.z)
    }

    pub fn min_elem(self, o: Self) -> Self {
        Self::new(self.x.min(o.x), self.y.min(o.y), self.z.min(o.z))
    }

    pub fn max_elem(self, o: Self) -> Self {
        Self::new(self.x.max(o.x), self.y.max(o.y), self.z.max(o.z))
    }

    pub fn lerp(self, o: Self, t: T) -> Self {
        self + (o - self) * t
    }

    /// Angle between two vectors in radians, clamped against rounding.
    pub fn angle(self, o: Self) -> T {
        let c = self.normalize().dot(o.normalize());
        c.max(-T::one()).min(T::one()).acos()
    }

    pub fn is_finite(self) -> bool {
        self.x.is_finite() && self.y.is_finite() && self.z.is_finite()
    }

    pub fn cast<U: Real>(self) -> Vector3<U> {
        Vector3::new(
            U::lit(self.x.to_f64_lossy()),
            U::lit(self.y.to_f64_lossy()),
            U::lit(self.z.to_f64_lossy()),
        )
    }

    /// Any unit vector orthogonal to `self`, built from the global axis least aligned with it.
    pub fn any_orthogonal(self) -> Self {
        let a = least_aligned_axis(self);
        a.cross(self).normalize()
    }
}

/// The global coordinate axis with the smallest absolute dot product against `d`
/// (ties resolved x, then y, then z).
pub fn least_aligned_axis<T: Real>(d: Vector3<T>) -> Vector3<T> {
    let (ax, ay, az) = (d.x.abs(), d.y.abs(), d.z.abs());
    if ax <= ay && ax <= az {
        Vector3::unit_x()
    } else if ay <= az {
        Vector3::unit_y()
    } else {
        Vector3::unit_z()
    }
}

impl<T: Real> Add for Vector3<T> {
    type Output = Self;
    #[inline]
    fn add(self, o: Self) -> Self {
        Self::new(self.x + o.x, self.y + o.y, self.z + o.z)
    }
}

impl<T: Real> AddAssign for Vector3<T> {
    #[inline]
    fn add_assign(&mut self, o: Self) {
        *self = *self + o;
    }
}

impl<T: Real> Sub for Vector3<T> {
    type Output = Self;
    #[inline]
    fn sub(self, o: Self) -> Self {
        Self::new(self.x - o.x, self.y - o.y, self.z - o.z)
    }
}

impl<T: Real> SubAssign for Vector3<T> {
    #[inline]
    fn sub_assign(&mut self, o: Self) {
        *self = *self - o;
    }
}

impl<T: Real> Mul<T> for Vector3<T> {
    type Output = Self;
    #[inline]
    fn mul(self, s: T) -> Self {
        Self::new(self.x * s, self.y * s, self.z * s)
    }
}

impl<T: Real> Neg for Vector3<T> {
    type Output = Self;
    #[inline]
    fn neg(self) -> Self {
        Self::new(-self.x, -self.y, -self.z)
    }
}

impl<T> Index<usize> for Vector3<T> {
    type Output = T;
    fn index(&self, i: usize) -> &T {
        match i {
            0 => &self.x,
            1 => &self.y,
            2 => &self.z,
            _ => panic!("Vector3 index {i} out of range"),
        }
    }
}

impl<T: Real + Serialize> Serialize for Vector3<T> {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        [self.x, self.y, self.z].serialize(s)
    }
}

impl<'de, T: Real + Deserialize<'de>> Deserialize<'de> for Vector3<T> {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let a = <[T; 3]>::deserialize(d)?;
        Ok(Self::from_array(a))
    }
}

/// Row-major 3×3 matrix.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Matrix3<T> {
    pub rows: [[T; 3]; 3],
}

impl<T: Real> Matrix3<T> {
    pub fn identity() -> Self {
        let (o, z) = (T::one(), T::zero());
        Self { rows: [[o, z, z], [z, o, z], [z, z, o]] }
    }

    /// Matrix whose columns are `a`, `b`, `c`.
    pub fn from_columns(a: Vector3<T>, b: Vector3<T>, c: Vector3<T>) -> Self {
        Self { rows: [[a.x, b.x, c.x], [a.y, b.y, c.y], [a.z, b.z, c.z]] }
    }

    pub fn column(&self, j: usize) -> Vector3<T> {
        Vector3::new(self.rows[0][j], self.rows[1][j], self.rows[2][j])
    }

    pub fn transpose(&self) -> Self {
        let r = &self.rows;
        Self { rows: [[r[0][0], r[1][0], r[2][0]], [r[0][1], r[1][1], r[2][1]], [r[0][2], r[1][2], r[2][2]]] }
    }

    pub fn determinant(&self) -> T {
        let r = &self.rows;
        r[0][0] * (r[1][1] * r[2][2] - r[1][2] * r[2][1]) - r[0][1] * (r[1][0] * r[2][2] - r[1][2] * r[2][0])
            + r[0][2] * (r[1][0] * r[2][1] - r[1][1] * r[2][0])
    }

    /// Rotation by `angle` radians about the (normalized) `axis`, right-hand rule.
    pub fn from_axis_angle(axis: Vector3<T>, angle: T) -> Self {
        let a = axis.normalize();
        let (s, c) = angle.sin_cos();
        let t = T::one() - c;
        Self {
            rows: [
                [t * a.x * a.x + c, t * a.x * a.y - s * a.z, t * a.x * a.z + s * a.y],
                [t * a.x * a.y + s * a.z, t * a.y * a.y + c, t * a.y * a.z - s * a.x],
                [t * a.x * a.z - s * a.y, t * a.y * a.z + s * a.x, t * a.z * a.z + c],
            ],
        }
    }

    /// Uniformly distributed rotation from three uniform samples in [0, 1) (Shoemake's method).
    pub fn random_rotation(u1: T, u2: T, u3: T) -> Self {
        let two_pi = T::PI() + T::PI();
        let a = (T::one() - u1).sqrt();
        let b = u1.sqrt();
        let (qx, qy) = (a * (two_pi * u2).sin(), a * (two_pi * u2).cos());
        let (qz, qw) = (b * (two_pi * u3).sin(), b * (two_pi * u3).cos());
        Self::from_quaternion(qw, qx, qy, qz)
    }

    pub fn from_quaternion(w: T, x: T, y: T, z: T) -> Self {
        let two = T::lit(2.0);
        let o = T::one();
        Self {
            rows: [
                [o - two * (y * y + z * z), two * (x * y - z * w), two * (x * z + y * w)],
                [two * (x * y + z * w), o - two * (x * x + z * z), two * (y * z - x * w)],
                [two * (x * z - y * w), two * (y * z + x * w), o - two * (x * x + y * y)],
            ],
        }
    }
}

impl<T: Real> Mul<Vector3<T>> for Matrix3<T> {
    type Output = Vector3<T>;
    #[inline]
    fn mul(self, v: Vector3<T>) -> Vector3<T> {
        let r = &self.rows;
        Vector3::new(
            r[0][0] * v.x + r[0][1] * v.y + r[0][2] * v.z,
            r[1][0] * v.x + r[1][1] * v.y + r[1][2] * v.z,
            r[2][0] * v.x + r[2][1] * v.y + r[2][2] * v.z,
        )
    }
}

impl<T: Real> Mul for Matrix3<T> {
    type Output = Self;
    fn mul(self, o: Self) -> Self {
        let mut rows = [[T::zero(); 3]; 3];
        for (i, row) in rows.iter_mut().enumerate() {
            for (j, v) in row.iter_mut().enumerate() {
                *v = (0..3).fold(T::zero(), |acc, k| acc + self.rows[i][k] * o.rows[k][j]);
            }
        }
        Self { rows }
    }
}
