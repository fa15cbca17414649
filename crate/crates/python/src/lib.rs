use pyo3::prelude::*;

#[pymodule]
fn hgode_py(_m: &Bound<'_, PyModule>) -> PyResult<()> {
    Ok(())
}
