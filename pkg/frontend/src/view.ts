/** DOM rendering for the annotation console. */

import { CANT_TELL, AnnotationSession, CardState } from "./state";

export function render(root: HTMLElement, session: AnnotationSession,
                       onAction: () => void): void {
  root.innerHTML = "";
  root.appendChild(renderProgress(session));
  if (session.progress.offline) {
    const banner = el("div", "banner offline");
    banner.textContent = "Connection lost; retrying. Your selections are kept.";
    root.appendChild(banner);
  }
  if (session.iterationComplete()) {
    root.appendChild(renderComplete(session, onAction));
    return;
  }
  const list = el("div", "cards");
  for (const card of session.cards) {
    list.appendChild(renderCard(card, session, onAction));
  }
  root.appendChild(list);
}

function renderProgress(session: AnnotationSession): HTMLElement {
  const box = el("div", "progress");
  const status = session.progress.status;
  const series = session.progress.accuracySeries;
  const stats = el("div", "stats");
  if (status) {
    stats.textContent =
      `${status.phase} | iteration ${status.iteration} | labeled ${status.labeled}` +
      ` | pending ${status.pending} | budget left ${status.budget_remaining}`;
  } else {
    stats.textContent = "connecting...";
  }
  box.appendChild(stats);
  const curve = el("div", "curve");
  curve.textContent = series.length
    ? "avg accuracy: " + series.map((a) => (100 * a).toFixed(1) + "%").join(" -> ")
    : "no evaluations yet";
  box.appendChild(curve);
  return box;
}

function renderComplete(session: AnnotationSession, onAction: () => void): HTMLElement {
  const box = el("div", "complete");
  const message = el("p");
  message.textContent = session.progress.status?.done
    ? "Run finished."
    : "Iteration complete. Waiting for the trainer...";
  box.appendChild(message);
  if (!session.progress.status?.done) {
    const button = el("button") as HTMLButtonElement;
    button.textContent = "Advance";
    button.onclick = async () => {
      await session.advance();
      onAction();
    };
    box.appendChild(button);
  }
  return box;
}

function renderCard(card: CardState, session: AnnotationSession,
                    onAction: () => void): HTMLElement {
  const box = el("div", "card");
  box.tabIndex = 0;
  box.onkeydown = (event) => {
    session.keyPress(card.item.id, event.key);
    onAction();
  };

  const img = el("img") as HTMLImageElement;
  img.src = card.item.image_url;
  img.width = 128;
  img.height = 128;
  box.appendChild(img);

  card.item.schema.attributes.forEach((attr, m) => {
    const row = el("div", m === card.activeAttribute ? "attribute active" : "attribute");
    const label = el("span", "name");
    const suggested = card.item.suggested[m];
    label.textContent = `${attr.name} (suggested: ${attr.classes[suggested] ?? "?"})`;
    row.appendChild(label);
    attr.classes.forEach((cls, c) => {
      row.appendChild(radio(card, m, c, cls, session, onAction));
    });
    row.appendChild(radio(card, m, CANT_TELL, "can't tell", session, onAction));
    box.appendChild(row);
  });

  if (card.error) {
    const error = el("div", "error");
    error.textContent = card.error;
    box.appendChild(error);
  }

  const submit = el("button") as HTMLButtonElement;
  submit.textContent = "Submit";
  submit.disabled = !session.canSubmit(card.item.id);
  submit.onclick = async () => {
    await session.submit(card.item.id);
    onAction();
  };
  box.appendChild(submit);
  return box;
}

function radio(card: CardState, attribute: number, value: number, text: string,
               session: AnnotationSession, onAction: () => void): HTMLElement {
  const wrap = el("label", "option");
  const input = el("input") as HTMLInputElement;
  input.type = "radio";
  input.name = `item${card.item.id}-attr${attribute}`;
  input.checked = card.selections[attribute] === value;
  input.onchange = () => {
    session.select(card.item.id, attribute, value);
    onAction();
  };
  wrap.appendChild(input);
  wrap.appendChild(document.createTextNode(text));
  return wrap;
}

function el(tag: string, className?: string): HTMLElement {
  const node = document.createElement(tag);
  if (className) node.className = className;
  return node;
}
