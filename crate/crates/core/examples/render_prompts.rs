//! Renders every built-in prompt template for a small Turkish setup.
//!
//!     cargo run --example render_prompts

use culture_manager::model::{
    AnswerFormat, CultureId, Demonstration, RetrievedMaterial, SampleContent, TaskSpec,
};
use culture_manager::prompts::Templates;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let t = Templates::embedded();
    let turkish = CultureId::new("Turkish")?;
    let arabic = CultureId::new("Arabic")?;
    let task = TaskSpec::new("tr-offensive", "offensive language", AnswerFormat::Binary01)?;
    let knowledge = TaskSpec::new("tr-norms", "cultural knowledge", AnswerFormat::TrueFalse)?;
    let demos = vec![
        Demonstration::new("tr#1", "tr-offensive", "Hakem yine maçı kendi oynadı")?,
        Demonstration::new("tr#2", "tr-offensive", "Komşular bayramda tatlı getirdi")?,
    ];
    let material = RetrievedMaterial {
        id: "turkish/tr-offensive/specific/q1/m".into(),
        query_id: "turkish/tr-offensive/specific/q1".into(),
        sources: vec![],
        summary: "Turkish football forums use regional nicknames as insults.".into(),
        k: 0,
        failures: vec![],
    };

    let prompts = [
        t.task_specific_query(3, &turkish, &task.label, &demos)?,
        t.task_agnostic_query(3, &turkish, &task.label)?,
        t.synthesis(4, &task, &material, &turkish, &demos)?,
        t.router(&[arabic, turkish], "Bu maç berbattı")?,
        t.task(&task, &SampleContent::text("Bu maç berbattı"))?,
        t.task(&knowledge, &SampleContent::qa("Is tea served after dinner?", "Yes"))?,
        t.anthropological("Turkish")?,
    ];
    for p in prompts {
        println!("==== {:?} ({:?})", p.template_id, p.role);
        println!("{}\n", p.text);
    }
    Ok(())
}
