"""
Relatório HTML de uma execução do pipeline (jinja2 + tabelas pandas +
figuras plotly embutidas).
"""
import logging
from datetime import datetime
from pathlib import Path

from jinja2 import Template

from components.artifact_store import atomic_write_text

logger = logging.getLogger(__name__)

TEMPLATE_HTML = """<!doctype html>
<html lang="pt-BR">
<head>
<meta charset="utf-8">
<title>{{ title }}</title>
<style>
  body { font: 14px/1.5 Helvetica, sans-serif; max-width: 1080px; margin: 2em auto; color: #1b1b1b; }
  header { border-bottom: 2px solid #08519c; margin-bottom: 1.5em; }
  header h1 { color: #08519c; margin-bottom: .2em; }
  header dl { display: grid; grid-template-columns: max-content auto; gap: 0 1em; color: #555; }
  section h2 { color: #2171b5; font-size: 1.2em; }
  pre.summary { background: #f4f4f4; padding: 1em; overflow-x: auto; }
  ul.kpis { list-style: none; padding: 0; display: flex; gap: 1em; }
  ul.kpis li { border-left: 4px solid #2171b5; background: #f7fbff; padding: .5em 1em; }
  ul.kpis strong { display: block; font-size: 1.6em; }
  table.scores { border-collapse: collapse; width: 100%; }
  table.scores td, table.scores th { border: 1px solid #ccc; padding: 4px 8px; }
  footer { margin-top: 3em; color: #777; font-size: 12px; }
</style>
</head>
<body>
<header>
  <h1>{{ title }}</h1>
  <dl>
    <dt>Execução</dt><dd>{{ run }}</dd>
    <dt>Config hash</dt><dd><code>{{ config_hash }}</code></dd>
    <dt>Versão</dt><dd>{{ version }}</dd>
  </dl>
</header>

<section>
  <h2>Resumo</h2>
  <pre class="summary">{{ summary }}</pre>
  {% if metrics %}
  <ul class="kpis">
    {% for m in metrics %}<li><strong>{{ m.value }}</strong>{{ m.label }}</li>{% endfor %}
  </ul>
  {% endif %}
</section>

{% for t in tables or [] %}
<section>
  <h2>{{ t.title }}</h2>
  {{ t.html | safe }}
</section>
{% endfor %}

{% if figures %}
<section>
  <h2>Curvas de Treino</h2>
  {% for f in figures %}{{ f | safe }}{% endfor %}
</section>
{% endif %}

{% if protocol %}
<section>
  <h2>Protocolo de Avaliação</h2>
  <ol>{% for p in protocol %}<li>{{ p }}</li>{% endfor %}</ol>
</section>
{% endif %}

<footer>Gerado em {{ timestamp }}</footer>
</body>
</html>
"""


def render_html_report(title, run, summary, config_hash, version, metrics=None, tables=None,
                       figures=None, protocol=None, out_html: Path = None) -> str:
    """Gera o relatório HTML; `tables` são dicts com title e df (DataFrame)"""
    rendered_tables = [
        {"title": t["title"], "html": t["df"].to_html(index=False, classes="scores", border=0)}
        for t in (tables or [])
    ]
    fragments = [fig.to_html(full_html=False, include_plotlyjs="cdn") for fig in (figures or [])]

    html = Template(TEMPLATE_HTML).render(
        title=title,
        run=run,
        summary=summary,
        config_hash=config_hash,
        version=version,
        timestamp=datetime.now().strftime("%Y-%m-%d %H:%M:%S"),
        metrics=metrics,
        tables=rendered_tables,
        figures=fragments,
        protocol=protocol,
    )

    if out_html:
        atomic_write_text(out_html, html)
        logger.info("Relatório HTML salvo: %s", Path(out_html).name)

    return html
