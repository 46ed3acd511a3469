import { TeleopApp, bindKeyboard } from "./app.js";
import { ACTIONS, ActionName, TreeDoc } from "./protocol.js";

function q<T extends HTMLElement>(id: string): T {
  const el = document.getElementById(id);
  if (!el) throw new Error(`missing #${id}`);
  return el as T;
}

async function boot(): Promise<void> {
  const host = location.host || "127.0.0.1:8701";
  const app = new TeleopApp(`ws://${host}/teleop`, {
    frameCanvas: q<HTMLCanvasElement>("frame"),
    mapCanvas: q<HTMLCanvasElement>("map"),
    hud: q("hud"),
    banner: q("banner"),
  });

  const buttons = q("buttons");
  for (const name of ACTIONS) {
    const b = document.createElement("button");
    b.textContent = name;
    b.addEventListener("click", () => app.sendNamedAction(name as ActionName));
    buttons.appendChild(b);
  }
  q("reset").addEventListener("click", () => app.handleKey("r"));
  q("record").addEventListener("click", () => app.handleKey("g"));

  bindKeyboard(app);
  app.start();
  try {
    const res = await fetch(`http://${host}/tree`);
    app.setTree((await res.json()) as TreeDoc);
  } catch {
    // map stays empty without the tree endpoint; camera still works
  }
}

boot();
