use sha2::{Digest, Sha256};
use vesselforge_core::phantom::{make_tube_phantom, straight_tube_spec};
use vesselforge_core::volume::{load_volume, save_volume};

const PINNED: &str = "b59fe1eecb5b3ddc851dc93572706e4cf469fbd83b245f09ed9d3d1d5f19c948";

fn data_hash(data: &[f64]) -> String {
    let mut h = Sha256::new();
    for v in data {
        h.update(v.to_le_bytes());
    }
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

#[test]
fn noisy_tube_file_matches_pinned_checksum() {
    let mut spec = straight_tube_spec([64; 3], 4.0, 4.0);
    spec.noise_sd = 10.0;
    spec.blur_sigma = 1.0;
    spec.seed = 1;
    let phantom = make_tube_phantom(&spec).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("tube.nrrd");
    save_volume(&phantom.image, &path).unwrap();
    let loaded = load_volume(&path).unwrap();
    assert_eq!(loaded, phantom.image);
    assert_eq!(data_hash(&loaded.data), PINNED);
}
