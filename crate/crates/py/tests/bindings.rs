use pyo3::prelude::*;
use pyo3::types::PyDict;
use pymammogrid::pymammogrid;

fn with_module<R>(f: impl FnOnce(Python<'_>, &Bound<'_, PyModule>) -> PyResult<R>) -> R {
    pyo3::append_to_inittab!(pymammogrid);
    Python::initialize();
    Python::attach(|py| {
        let m = py.import("pymammogrid").unwrap();
        f(py, &m).unwrap()
    })
}

#[test]
fn phantom_analysis_and_queries() {
    with_module(|py, m| {
        let (raw, truth): (Vec<u8>, Bound<'_, PyDict>) = m.getattr("phantom")?.call1((3u64, 128usize, 128usize, 8u8, 1usize))?.extract()?;
        let spots: Vec<(f64, f64)> = truth.get_item("spots")?.unwrap().extract()?;
        assert_eq!(spots.len(), 1);
        let (anon, pseudo): (Vec<u8>, String) = m.getattr("anonymize")?.call1((raw, vec![1u8; 32]))?.extract()?;
        assert_eq!(pseudo.len(), 16);
        let metrics = m.getattr("analyze")?.call1((anon,))?;
        let count: u64 = metrics.get_item("microcalc_count")?.extract()?;
        assert_eq!(count, 1);
        let text: String = m.getattr("normalize_query")?.call1(("select image.lfn where patient.age > 5",))?.extract()?;
        assert_eq!(text, "SELECT image.lfn WHERE patient.age > 5");
        let err = m.getattr("normalize_query")?.call1(("SELECT",)).unwrap_err();
        assert!(err.is_instance_of::<pyo3::exceptions::PyValueError>(py));
        assert!(m.getattr("pseudonym")?.call1((vec![0u8; 3], "x")).is_err());
        Ok(())
    })
}
