import init, { Demo } from "./pkg/plotnpolish_wasm_demo.js";

const SIZE = 128;
const STEPS = 20;
const SEED = 7;
const GROUP_COLORS = ["#e8590c", "#1c7ed6", "#2f9e44", "#ae3ec9", "#f08c00", "#0c8599"];

const $ = (id) => document.getElementById(id);
let demo;
let figures = [];

function status(text, isError = false) {
  $("status").textContent = text;
  $("status").classList.toggle("error", isError);
}

function build() {
  const [rows, cols] = $("layout").value.split("x").map(Number);
  demo?.free();
  demo = new Demo(SIZE, STEPS, SEED, rows, cols);
  $("step").max = String(STEPS);

  $("frames").replaceChildren();
  $("pages").replaceChildren();
  figures = [];
  for (let page = 1; page <= demo.pages; page++) {
    const figure = document.createElement("figure");
    const canvas = document.createElement("canvas");
    canvas.width = canvas.height = demo.size;
    const caption = document.createElement("figcaption");
    caption.textContent = `${page}. ${demo.caption(page)}`;
    figure.append(canvas, caption);
    $("frames").append(figure);
    figures.push(figure);

    const label = document.createElement("label");
    const box = document.createElement("input");
    box.type = "checkbox";
    box.value = String(page);
    label.append(box, ` ${page}`);
    $("pages").append(label);
  }
  draw([]);
  showGroups();
  status("Ready. Leave every page unticked to edit all of them.");
}

function draw(changed) {
  figures.forEach((figure, i) => {
    const canvas = figure.querySelector("canvas");
    const pixels = new Uint8ClampedArray(demo.frame(i + 1));
    canvas.getContext("2d").putImageData(new ImageData(pixels, demo.size, demo.size), 0, 0);
    figure.classList.toggle("changed", changed.includes(i + 1));
  });
}

function showGroups() {
  const t = Number($("step").value);
  $("step-label").textContent = String(t);
  JSON.parse(demo.groupsAt(t)).forEach((group, g) => {
    for (const page of group) {
      figures[page - 1].style.borderColor = GROUP_COLORS[g % GROUP_COLORS.length];
    }
  });
}

function run(label, action) {
  status(`${label}…`);
  // Let the status paint before the synchronous wasm call.
  setTimeout(() => {
    try {
      const started = performance.now();
      const summary = JSON.parse(action());
      draw(summary.changed_pages);
      showGroups();
      const ms = Math.round(performance.now() - started);
      const warnings = summary.warnings.length ? ` Warnings: ${summary.warnings.join("; ")}` : "";
      status(`Turn ${summary.turn}: changed pages ${summary.changed_pages.join(", ") || "none"}, ` +
        `${summary.mask_reads} mask reads, ${ms} ms.${warnings}`);
    } catch (e) {
      status(String(e.message ?? e), true);
    }
  }, 0);
}

$("local-run").onclick = () => {
  const pages = [...$("pages").querySelectorAll("input:checked")].map((b) => Number(b.value));
  run("Editing character", () =>
    demo.editCharacter($("concept").value, $("local-prompt").value, new Uint32Array(pages)));
};

$("style-run").onclick = () => run("Restyling", () => demo.editStyle($("style-prompt").value));

$("undo").onclick = () => {
  try {
    demo.undo();
    draw([]);
    showGroups();
    status(`Back at turn ${demo.head}.`);
  } catch (e) {
    status(String(e.message ?? e), true);
  }
};

$("step").oninput = showGroups;
$("layout").onchange = build;

await init();
build();
