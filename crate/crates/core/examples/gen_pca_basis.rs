//! Regenerates `data/pca_basis.toml` from the synthetic hand-pose model.

use handfabric::action_space::synthetic_basis;
use handfabric::kinematics::RobotModel;

fn main() {
    let model = RobotModel::reference();
    let basis = synthetic_basis(model.hand_joints(), 2000, 17).expect("basis");
    let text = basis.to_text("PCA hand synergy basis fitted to 2000 synthetic grasp poses (seed 17).");
    let path = concat!(env!("CARGO_MANIFEST_DIR"), "/data/pca_basis.toml");
    std::fs::write(path, text).expect("write basis");
    println!("wrote {path}");
}
