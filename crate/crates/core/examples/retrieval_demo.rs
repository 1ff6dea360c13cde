// Fills a prompt store and shows which stored prompt each query retrieves.

use continual_t2v::retrieval::{embed_prompt, similarity, PromptStore};

pub fn run_example() -> anyhow::Result<()> {
    let mut store = PromptStore::new();
    for (i, p) in [
        "a red square moves right",
        "a blue circle moves up",
        "a green triangle moves left",
        "a yellow square moves down",
    ]
    .iter()
    .enumerate()
    {
        store.push(p, &format!("train_{i:03}"))?;
    }

    for query in ["a red square moves left", "blue circle going up", "A YELLOW square, moving down!"] {
        let r = store.retrieve(query)?;
        println!("{query:<32} -> {:<28} ({}, score {:.3})", r.prompt, r.video_id, r.score);
    }
    let a = embed_prompt("a red square moves right")?;
    let b = embed_prompt("a red square moves left")?;
    println!("similarity of the two red squares: {:.3}", similarity(&a, &b));
    Ok(())
}

#[allow(dead_code)]
fn main() -> anyhow::Result<()> {
    run_example()
}
