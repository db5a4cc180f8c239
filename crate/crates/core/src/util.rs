use nalgebra::{DMatrix, DVector, Matrix3, Vector3};

/// Serde adapter storing a `DVector<f64>` as a plain JSON array.
pub mod serde_dvec {
    use nalgebra::DVector;
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    pub fn serialize<S: Serializer>(v: &DVector<f64>, s: S) -> Result<S::Ok, S::Error> {
        v.as_slice().serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<DVector<f64>, D::Error> {
        let v = Vec::<f64>::deserialize(d)?;
        Ok(DVector::from_vec(v))
    }
}

/// Serde adapter for `Vec<DVector<f64>>`.
pub mod serde_dvec_seq {
    use nalgebra::DVector;
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    pub fn serialize<S: Serializer>(v: &[DVector<f64>], s: S) -> Result<S::Ok, S::Error> {
        let rows: Vec<&[f64]> = v.iter().map(|x| x.as_slice()).collect();
        rows.serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<DVector<f64>>, D::Error> {
        let v = Vec::<Vec<f64>>::deserialize(d)?;
        Ok(v.into_iter().map(DVector::from_vec).collect())
    }
}

pub fn vec3(a: &[f64; 3]) -> Vector3<f64> {
    Vector3::new(a[0], a[1], a[2])
}

pub fn mat3(a: &[[f64; 3]; 3]) -> Matrix3<f64> {
    Matrix3::from_fn(|i, j| a[i][j])
}

pub fn seg3(v: &DVector<f64>, at: usize) -> Vector3<f64> {
    Vector3::new(v[at], v[at + 1], v[at + 2])
}

pub fn set3(v: &mut DVector<f64>, at: usize, x: &Vector3<f64>) {
    v[at] = x.x;
    v[at + 1] = x.y;
    v[at + 2] = x.z;
}

pub fn add_block3(m: &mut DMatrix<f64>, r: usize, c: usize, b: &Matrix3<f64>) {
    for i in 0..3 {
        for j in 0..3 {
            m[(r + i, c + j)] += b[(i, j)];
        }
    }
}

pub fn inf_norm(v: &DVector<f64>) -> f64 {
    v.iter().fold(0.0_f64, |m, x| m.max(x.abs()))
}

pub(crate) fn read_json<T: serde::de::DeserializeOwned>(path: &std::path::Path) -> crate::Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| crate::Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| crate::Error::Schema {
        path: path.display().to_string(),
        message: e.to_string(),
    })
}

pub(crate) fn write_json<T: serde::Serialize>(path: &std::path::Path, value: &T) -> crate::Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    std::fs::write(path, text + "\n").map_err(|e| crate::Error::io(path, e))
}
