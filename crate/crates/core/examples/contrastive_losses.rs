// Similarities, retrieval distributions and the symmetric objective on
// hand-sized inputs.

use imu_align::contrastive::{
    info_nce, retrieval_distribution, similarity_matrix, symmetric_loss, trimodal_loss, Direction, Modality,
};

pub fn run_example() -> Result<(), Box<dyn std::error::Error>> {
    let imu = vec![vec![1.0, 0.0], vec![0.6, 0.8]];
    let video = vec![vec![0.8, 0.6], vec![0.0, 1.0]];
    let text = vec![vec![1.0, 0.0], vec![0.0, 1.0]];

    let s_iv = similarity_matrix(&imu, &video, Modality::Imu, Modality::Video)?;
    let s_it = similarity_matrix(&imu, &text, Modality::Imu, Modality::Text)?;
    println!("sims(imu, video) = {:?}", s_iv.values.data());

    for gamma in [1.0, 0.1] {
        let p = retrieval_distribution(&s_iv, gamma, Direction::RowToCol)?;
        println!("γ = {gamma}: P(video | imu) = {:?}", p.data());
    }

    let sym = symmetric_loss(&s_iv, 0.1)?;
    println!("i→v {:.4}  v→i {:.4}  symmetric {:.4}", sym.forward, sym.backward, sym.symmetric);

    let all = trimodal_loss(&s_iv, &s_it, 0.1)?;
    println!("trimodal total {:.4}", all.l_total.unwrap());

    let eye = similarity_matrix(&text, &text, Modality::Text, Modality::Text)?;
    println!("identity sims, B = 2, γ = 1: {:.5}", info_nce(&eye, 1.0, Direction::RowToCol)?);
    Ok(())
}

#[allow(dead_code)]
fn main() {
    run_example().unwrap();
}
