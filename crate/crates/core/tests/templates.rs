use cfcml::dataio::{render_template, standard_attributes, TemplateTable};

const GOLDEN: &str = include_str!("data/templates_golden.tsv");

#[test]
fn ten_templates_render_byte_exactly() {
    let table = TemplateTable::standard();
    let rows: Vec<Vec<&str>> = GOLDEN.lines().map(|l| l.split('\t').collect()).collect();
    assert_eq!(rows.len(), 10);
    let names: Vec<&str> = standard_attributes().collect();
    for (row, name) in rows.iter().zip(&names) {
        let [attribute, template, value, sentence] = row[..] else {
            panic!("malformed golden row {row:?}");
        };
        assert_eq!(attribute, *name);
        assert_eq!(table.template_for(attribute), Some(template));
        assert_eq!(render_template(attribute, value).unwrap().as_bytes(), sentence.as_bytes());
    }
}
