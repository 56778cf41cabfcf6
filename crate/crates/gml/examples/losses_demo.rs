//! Evaluates the task loss (Jaccard distance), the alignment loss (regional
//! KLD), and the two mutual-learning composites on a single toy voxel pair,
//! then on a small grid.

use gml::losses::{
    jaccard_distance, mutual_loss_receiver, mutual_loss_sender, rkld, rkld_with, KldVariant,
    DEFAULT_JACCARD_EPS, DEFAULT_PROB_CLAMP,
};
use gml::Grid;

fn main() -> gml::Result<()> {
    // One voxel: the receiver predicts 0.8, the visiting sender 0.4, truth 1.
    let pr = Grid::from_vec(&[1], vec![0.8])?;
    let ps = Grid::from_vec(&[1], vec![0.4])?;
    let t = Grid::from_vec(&[1], vec![1.0])?;

    let jd = jaccard_distance(&pr, &t, DEFAULT_JACCARD_EPS)?;
    let kl = rkld(&pr, &ps, &t)?;
    let recv = mutual_loss_receiver(&pr, &ps, &t, DEFAULT_JACCARD_EPS)?;
    let send = mutual_loss_sender(&ps, &pr, &t, DEFAULT_JACCARD_EPS)?;
    println!("single voxel, receiver 0.8 vs sender 0.4, truth 1:");
    println!("  JD(0.8, 1)            = {:.6}", jd.value);
    println!("  rKLD(0.8 || 0.4)      = {:.6}  (0.8*ln2)", kl.value);
    println!("  receiver loss (JD+KL) = {:.6}", recv.value);
    println!("  sender   loss (JD+KL) = {:.6}  (KL term negative)", send.value);

    let full = rkld_with(&pr, &ps, &t, KldVariant::Full, DEFAULT_PROB_CLAMP)?;
    println!("  full-KLD variant      = {:.6}  (always >= 0)", full.value);

    // A 2x2 grid: alignment pressure exists only inside the truth mask.
    let p1 = Grid::from_vec(&[2, 2], vec![0.9, 0.2, 0.6, 0.1])?;
    let p2 = Grid::from_vec(&[2, 2], vec![0.5, 0.9, 0.6, 0.95])?;
    let mask = Grid::from_vec(&[2, 2], vec![1.0, 0.0, 1.0, 0.0])?;
    let kl = rkld(&p1, &p2, &mask)?;
    println!("\n2x2 grid, mask selects two voxels:");
    println!("  rKLD value            = {:.6}", kl.value);
    println!("  gradient              = {:?}", kl.grad_wrt_first_prediction.data());
    println!("  (zero outside the mask: the peer is compared only on tumor voxels)");
    Ok(())
}
