/**
 * Session controller for the annotation console.
 *
 * Pure state logic, no DOM: the view renders whatever `snapshot()` says
 * and forwards user intents. Submissions that fail with a network error
 * are kept in a retry queue so no selection is ever lost; a 409 means the
 * item was already labeled elsewhere and its card is dropped.
 */

import { AnnotationApi, ApiError, MetricsRow, QueueItem, Status } from "./api";

export const CANT_TELL = -1;

export interface CardState {
  item: QueueItem;
  /** one selection per attribute; null until the user picks */
  selections: (number | null)[];
  activeAttribute: number;
  error: string | null;
}

export interface ProgressState {
  status: Status | null;
  /** average accuracy per completed iteration, index 0 = pre-adaptation */
  accuracySeries: number[];
  offline: boolean;
}

export class AnnotationSession {
  cards: CardState[] = [];
  progress: ProgressState = { status: null, accuracySeries: [], offline: false };
  private retryQueue: { id: number; labels: number[] }[] = [];

  constructor(private api: AnnotationApi) {}

  // ---- queue management -------------------------------------------------

  async refresh(): Promise<void> {
    try {
      const [status, queue] = await Promise.all([this.api.status(), this.api.queue()]);
      this.progress.status = status;
      this.progress.offline = false;
      this.mergeQueue(queue);
      await this.refreshMetrics();
      await this.flushRetries();
    } catch (err) {
      // network trouble: keep every card and selection, just flag it
      this.progress.offline = true;
    }
  }

  private mergeQueue(queue: QueueItem[]): void {
    const existing = new Map(this.cards.map((c) => [c.item.id, c]));
    this.cards = queue.map((item) => {
      const kept = existing.get(item.id);
      if (kept) {
        kept.item = item;
        return kept;
      }
      return {
        item,
        selections: item.schema.attributes.map(() => null),
        activeAttribute: 0,
        error: null,
      };
    });
  }

  async refreshMetrics(): Promise<void> {
    const rows = await this.api.metrics();
    this.progress.accuracySeries = accuracySeries(rows);
  }

  // ---- selection --------------------------------------------------------

  select(cardId: number, attribute: number, value: number | typeof CANT_TELL): void {
    const card = this.cards.find((c) => c.item.id === cardId);
    if (!card) return;
    const classes = card.item.schema.attributes[attribute]?.classes;
    if (!classes) return;
    if (value !== CANT_TELL && (value < 0 || value >= classes.length)) {
      card.error = `class ${value + 1} does not exist for ${card.item.schema.attributes[attribute].name}`;
      return;
    }
    card.selections[attribute] = value;
    card.error = null;
    if (attribute === card.activeAttribute &&
        card.activeAttribute < card.selections.length - 1) {
      card.activeAttribute += 1;
    }
  }

  /** keyboard shortcut on the active attribute: keys 1..9 pick a class, 0 picks "can't tell" */
  keyPress(cardId: number, key: string): void {
    const card = this.cards.find((c) => c.item.id === cardId);
    if (!card) return;
    if (key === "0") {
      this.select(cardId, card.activeAttribute, CANT_TELL);
    } else if (/^[1-9]$/.test(key)) {
      this.select(cardId, card.activeAttribute, Number(key) - 1);
    }
  }

  canSubmit(cardId: number): boolean {
    const card = this.cards.find((c) => c.item.id === cardId);
    return !!card && card.selections.every((s) => s !== null);
  }

  // ---- submission -------------------------------------------------------

  async submit(cardId: number): Promise<void> {
    const card = this.cards.find((c) => c.item.id === cardId);
    if (!card || !this.canSubmit(cardId)) return;
    const labels = card.selections.map((s) => s as number);
    try {
      await this.api.submitLabels({ id: cardId, labels });
      this.dropCard(cardId);
    } catch (err) {
      if (err instanceof ApiError) {
        if (err.status === 409) {
          // already labeled elsewhere; the card is stale
          this.dropCard(cardId);
        } else {
          card.error = `rejected by the service (${err.status})`;
        }
      } else {
        // offline: queue for retry, keep nothing on the board
        this.retryQueue.push({ id: cardId, labels });
        this.dropCard(cardId);
        this.progress.offline = true;
      }
    }
  }

  async flushRetries(): Promise<void> {
    const queued = this.retryQueue;
    this.retryQueue = [];
    for (const entry of queued) {
      try {
        await this.api.submitLabels({ id: entry.id, labels: entry.labels });
      } catch (err) {
        if (err instanceof ApiError) continue; // definitive answer: drop
        this.retryQueue.push(entry); // still offline
      }
    }
  }

  pendingRetries(): number {
    return this.retryQueue.length;
  }

  private dropCard(cardId: number): void {
    this.cards = this.cards.filter((c) => c.item.id !== cardId);
  }

  // ---- iteration --------------------------------------------------------

  iterationComplete(): boolean {
    return this.cards.length === 0 && this.retryQueue.length === 0;
  }

  async advance(): Promise<boolean> {
    if (!this.iterationComplete()) return false;
    return this.api.advance();
  }
}

/** Average-accuracy trace: one point per adaptation iteration, 0 first. */
export function accuracySeries(rows: MetricsRow[]): number[] {
  const points = rows
    .filter((r) => r.phase === "cal" && r.task === "avg" && r.accuracy !== null)
    .sort((a, b) => a.cycle_or_iter - b.cycle_or_iter);
  return points.map((r) => r.accuracy as number);
}
