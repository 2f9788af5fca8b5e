#![no_main]
use libfuzzer_sys::fuzz_target;
use qprobe::linalg::TensorArchive;
use qprobe::network::{NetworkManifest, NetworkSpec};

fn take<'a>(data: &mut &'a [u8]) -> Option<&'a str> {
    if data.len() < 2 {
        return None;
    }
    let n = u16::from_le_bytes([data[0], data[1]]) as usize;
    let rest = &data[2..];
    let (head, tail) = rest.split_at(n.min(rest.len()));
    *data = tail;
    std::str::from_utf8(head).ok()
}

// layout: [len][manifest json][len][archive index json][sidecar bytes]
fuzz_target!(|data: &[u8]| {
    let mut data = data;
    let Some(manifest) = take(&mut data).and_then(|s| NetworkManifest::parse(s).ok()) else {
        return;
    };
    let Some(index) = take(&mut data).and_then(|s| TensorArchive::parse_index(s).ok()) else {
        return;
    };
    let Ok(archive) = TensorArchive::decode(&index, data) else {
        return;
    };
    if let Ok(spec) = NetworkSpec::from_manifest(&manifest, &archive) {
        let (m2, a2) = spec.to_manifest();
        let again = NetworkSpec::from_manifest(&m2, &a2).expect("rebuild");
        assert_eq!(again.len(), spec.len());
    }
});
