//! Print the classifier and generator prompts for one instruction, with and
//! without retrieved samples.

use netword::corpus::ClassCatalog;
use netword::prompting::{
    build_classifier_prompt, build_generator_prompt, PromptTemplates, SampleBlock,
};

fn main() {
    let templates = PromptTemplates::default();
    let catalog = ClassCatalog::default_catalog();
    let instruction = "Could you please give me the list of active users since 2 March.";

    let class_samples: SampleBlock = [("I want list of active users", "list")]
        .into_iter()
        .collect();
    let p = build_classifier_prompt(&templates, &catalog, instruction, &class_samples, true);
    println!(
        "##### classifier (system)\n{}\n##### classifier (user)\n{}",
        p.system_text, p.user_text
    );

    let command_samples: SampleBlock = [(
        "Could you kindly offer me a the list of active users since 2024/08/10 ?",
        "list users --active 20240810 now",
    )]
    .into_iter()
    .collect();
    let list = catalog.get("list").expect("list class");
    for rag in [true, false] {
        let p = build_generator_prompt(&templates, list, instruction, &command_samples, rag, false);
        println!("##### generator user text, rag={rag}\n{}", p.user_text);
    }
}
