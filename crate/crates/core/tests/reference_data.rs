use handfabric::reference::{Distribution, ReferenceResults, VisualRandomization};

#[test]
fn binpack_reference_rows() {
    let r = ReferenceResults::reference();
    let rows: Vec<(&str, [f64; 2], [f64; 2], u32)> = r.binpack.iter().map(|b| (b.label.as_str(), b.cs, b.ct, b.sr)).collect();
    assert_eq!(
        rows,
        [
            ("depth", [6.56, 2.41], [10.66, 0.84], 87),
            ("rgb_mono", [3.24, 1.58], [8.63, 1.62], 73),
            ("rgb_stereo", [4.53, 1.75], [8.22, 1.10], 77),
            ("rgb_mono_hdr", [3.83, 1.35], [8.18, 1.82], 73),
            ("rgb_stereo_hdr", [3.24, 0.91], [9.07, 1.40], 74),
        ]
    );
    assert!(r.get("rgb_stereo").is_some());
    assert!(ReferenceResults::from_text("[[binpack]]\nlabel = \"x\"\ncs = [1.0, 0.0]\nct = [1.0, 0.0]\nsr = 101\n").is_err());
}

#[test]
fn visual_randomization_values() {
    let v = VisualRandomization::reference();
    assert_eq!(v.hdri_probability, 0.3);
    let u = |lo: f64, hi: f64| Distribution::Uniform([lo, hi]);
    assert_eq!(v.lighting["intensity"], u(1000.0, 4000.0));
    assert_eq!(v.object["texture_scale"], u(0.7, 5.0));
    for k in ["diffuse_tint", "roughness", "metallic", "specular"] {
        assert_eq!(v.object[k], u(0.0, 1.0), "{k}");
    }
    assert_eq!(v.robot["roughness"], u(0.2, 1.0));
    assert_eq!(v.robot["metallic"], u(0.0, 0.8));
    assert_eq!(v.robot["specular"], u(0.0, 1.0));
    assert_eq!(v.table["texture_rotate"], u(0.0, std::f64::consts::TAU));
    assert_eq!(v.table["diffuse_tint"], Distribution::Uniform3([[0.3, 0.2, 0.1], [0.6, 0.4, 0.2]]));
    assert_eq!(v.table["roughness"], u(0.3, 0.9));
    assert_eq!(v.table["specular"], u(0.0, 1.0));
    let a = &v.augmentation;
    assert_eq!((a.random_background, a.color_jitter, a.random_blur), (0.5, 1.0, 0.1));
}

#[test]
fn visual_randomization_rejects_bad_ranges() {
    let text = include_str!("../data/visual_randomization.toml");
    assert!(VisualRandomization::from_text(&text.replace("random_blur = 0.1", "random_blur = 1.1")).is_err());
    assert!(VisualRandomization::from_text(&text.replace("[0.2, 1.0]", "[1.0, 0.2]")).is_err());
}
