use pyo3::ffi::c_str;
use pyo3::prelude::*;

#[test]
fn module_runs_in_embedded_interpreter() {
    use tdnpy::tdnpy;
    pyo3::append_to_inittab!(tdnpy);
    Python::initialize();
    Python::attach(|py| {
        py.run(
            c_str!(
                r#"
import tdnpy as td
net = "input 8 8 1\nconv c k=3 f=4 bn=1\ngap g\ndense d units=3\nsoftmax s\n"
assert td.analyze(net)["params"] == 3 * 3 * 4 + 2 * 4 + 4 * 3 + 3
assert td.check(97263435) and not td.check(106000000)
assert abs(td.netscore(98.0, 24136710, 1115962374) - 65.35) < 0.01
rows = td.Model(net).infer([[0.5] * 64])
assert len(rows) == 1 and abs(sum(rows[0]) - 1.0) < 1e-5
try:
    td.Model("input 8 8 1\nbogus x\n")
    raise AssertionError("no error")
except ValueError:
    pass
"#
            ),
            None,
            None,
        )
        .unwrap();
    });
}
