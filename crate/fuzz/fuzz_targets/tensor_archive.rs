#![no_main]
use libfuzzer_sys::fuzz_target;
use qprobe::linalg::TensorArchive;

// first two bytes give the index length, the rest is the sidecar
fuzz_target!(|data: &[u8]| {
    if data.len() < 2 {
        return;
    }
    let n = u16::from_le_bytes([data[0], data[1]]) as usize;
    let body = &data[2..];
    let (index, bytes) = body.split_at(n.min(body.len()));
    let Ok(text) = std::str::from_utf8(index) else {
        return;
    };
    if let Ok(idx) = TensorArchive::parse_index(text) {
        if let Ok(archive) = TensorArchive::decode(&idx, bytes) {
            let (idx2, bytes2) = archive.encode("fuzz.bin");
            let again = TensorArchive::decode(&idx2, &bytes2).expect("re-decode");
            assert_eq!(again, archive);
        }
    }
});
