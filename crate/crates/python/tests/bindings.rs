use std::ffi::CString;
use std::sync::Once;

use pyo3::prelude::*;
use pycompgan::pycompgan as pycompgan_module;

static INIT: Once = Once::new();

fn run(code: &str) {
    INIT.call_once(|| {
        pyo3::append_to_inittab!(pycompgan_module);
        Python::initialize();
    });
    let code = CString::new(code).unwrap();
    Python::attach(|py| {
        if let Err(e) = py.run(&code, None, None) {
            e.print(py);
            panic!("python code failed");
        }
    });
}

#[test]
fn schema_names_slots() {
    run(r#"
import pycompgan as cg
s = cg.Schema.toy()
names = s.slot_names()
hair = s.class_names().index("hair")
assert names[2 * hair + 2] == "hair.texture", names
assert s.parse_slots("hair.shape") == [2 * hair + 1]
try:
    s.parse_slots("tail")
    raise AssertionError("unknown slot accepted")
except ValueError:
    pass
"#);
}

#[test]
fn bundles_mix_and_lerp() {
    run(r#"
import pycompgan as cg
a = cg.LatentBundle(2, 3, [0.0] * 15)
b = cg.LatentBundle(2, 3, [float(i) for i in range(15)])
m = a.mix(b, [1])
assert m.slot(1) == b.slot(1) and m.slot(0) == a.slot(0)
assert a.lerp(b, 0.5, [2]).slot(2) == [v / 2 for v in b.slot(2)]
try:
    cg.LatentBundle(2, 3, [0.0] * 14)
    raise AssertionError("bad length accepted")
except ValueError:
    pass
"#);
}

#[test]
fn fusion_weights_sum_to_one() {
    run(r#"
import pycompgan as cg
coarse, modified = cg.fuse([[1.0, -2.0], [0.5, 3.0], [0.0, 0.0]], [False, False, False])
for p in range(2):
    assert abs(sum(c[p] for c in coarse) - 1.0) < 1e-12
    assert all(abs(c[p] - m[p]) < 1e-12 for c, m in zip(coarse, modified))
"#);
}
