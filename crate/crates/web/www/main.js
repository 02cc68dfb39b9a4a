import init, { assemblePrompt, scorePredictions, tagTokens } from "./pkg/asag_web.js";

const $ = (id) => document.getElementById(id);

function escape(s) {
  return s.replace(/[&<>"]/g, (c) => ({ "&": "&amp;", "<": "&lt;", ">": "&gt;", '"': "&quot;" })[c]);
}

function fail(el, e) {
  el.innerHTML = `<span class="err">${escape(String(e))}</span>`;
}

function parseExamples(text) {
  return text
    .split("\n")
    .map((l) => l.trim())
    .filter(Boolean)
    .map((l) => {
      const i = l.indexOf("|");
      if (i < 0) throw new Error(`missing score in "${l}"`);
      return { score: Number(l.slice(0, i)), text: l.slice(i + 1).trim() };
    });
}

function assemble() {
  const out = $("prompt");
  try {
    const req = {
      question: $("question").value,
      question_id: "demo",
      response: $("response").value,
      examples: parseExamples($("examples").value),
      config: {
        use_question_text: $("use_question_text").checked,
        use_question_id: $("use_question_id").checked,
        use_scale: $("use_scale").checked,
        use_examples: $("use_examples").checked,
        total_token_cap: Number($("total_token_cap").value),
      },
    };
    const res = JSON.parse(assemblePrompt(JSON.stringify(req)));
    $("segments").innerHTML = res.bundle.segments
      .map((s) => `<span class="seg${s.truncated ? " cut" : ""}" title="${escape(s.payload)}">${s.kind}</span>`)
      .join("");
    out.textContent = `${res.bundle.assembled}\n\n${res.tokens} / ${res.budget} tokens`;
  } catch (e) {
    $("segments").innerHTML = "";
    fail(out, e);
  }
}

function score() {
  const out = $("metrics");
  try {
    const labels = [];
    const probs = [];
    for (const line of $("preds").value.split("\n").map((l) => l.trim()).filter(Boolean)) {
      const v = line.split(/\s+/).map(Number);
      if (v.length !== 6 || v.some(Number.isNaN)) throw new Error(`expected 6 numbers: "${line}"`);
      labels.push(v[0]);
      probs.push(v.slice(1));
    }
    const req = { labels, probs, config: { kappa_weighting: $("kappa").value } };
    const r = JSON.parse(scorePredictions(JSON.stringify(req)));
    const f = (x) => (x === null || x === undefined ? "-" : x.toFixed(3));
    const perClass = Object.entries(r.per_class_auc)
      .map(([k, v]) => `<tr><td>AUC class ${k}</td><td>${f(v)}</td></tr>`)
      .join("");
    out.innerHTML = `<table>
      <tr><th>metric</th><th>value</th></tr>
      <tr><td>AUC</td><td>${f(r.auc)}</td></tr>
      <tr><td>RMSE</td><td>${f(r.rmse)}</td></tr>
      <tr><td>Kappa</td><td>${f(r.kappa)}</td></tr>
      ${perClass}
      <tr><td>items</td><td>${r.n_items}</td></tr>
    </table>${r.note ? `<p>${escape(r.note)}</p>` : ""}`;
  } catch (e) {
    fail(out, e);
  }
}

function tag() {
  const out = $("tagged");
  try {
    const r = JSON.parse(tagTokens($("tagtext").value));
    const words = r.tokens.map((t) => (t.math ? `<span class="math">${escape(t.token)}</span>` : escape(t.token)));
    out.innerHTML = `${words.join(" ")}<br><small>${r.math_token_pct.toFixed(1)}% math tokens, ${
      r.is_math ? "math" : "text"
    } response</small>`;
  } catch (e) {
    fail(out, e);
  }
}

init().then(() => {
  $("status").textContent = "Ready.";
  $("assemble").onclick = assemble;
  $("score").onclick = score;
  $("tag").onclick = tag;
  assemble();
  score();
  tag();
});
