use pyo3::prelude::*;

#[pymodule]
fn gru_aunet_py(_m: &Bound<'_, PyModule>) -> PyResult<()> {
    Ok(())
}
