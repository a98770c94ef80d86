use pyo3::prelude::*;

#[pymodule]
fn poselift_py(_m: &Bound<'_, PyModule>) -> PyResult<()> {
    Ok(())
}
