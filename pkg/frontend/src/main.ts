import { AnnotationApi } from "./api";
import { AnnotationSession } from "./state";
import { render } from "./view";

const api = new AnnotationApi("");
const session = new AnnotationSession(api);
const root = document.getElementById("app") as HTMLElement;

function repaint() {
  render(root, session, repaint);
}

async function tick() {
  await session.refresh();
  repaint();
}

tick();
setInterval(tick, 2000);
