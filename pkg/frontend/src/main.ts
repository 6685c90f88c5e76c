/** Entry point: resolve the annotator identity, wire session to view. */

import { ApiClient } from './api.js';
import { AnnotationSession } from './session.js';
import { AnnotationView } from './ui.js';

const STORAGE_KEY = 'annotation-ui.annotator';

function resolveAnnotator(): string {
  const fromQuery = new URLSearchParams(window.location.search).get('annotator');
  if (fromQuery) {
    window.localStorage.setItem(STORAGE_KEY, fromQuery);
    return fromQuery;
  }
  const stored = window.localStorage.getItem(STORAGE_KEY);
  if (stored) return stored;
  const typed = window.prompt('标注者名字 · annotator name:')?.trim();
  if (!typed) throw new Error('annotator name required');
  window.localStorage.setItem(STORAGE_KEY, typed);
  return typed;
}

function boot(): void {
  const root = document.getElementById('app');
  if (!root) throw new Error('missing #app container');
  const api = new ApiClient('');
  let view: AnnotationView;
  const session = new AnnotationSession(api, resolveAnnotator(), (state) =>
    view.update(state),
  );
  view = new AnnotationView(root, session, api);
  view.bindKeys();
  void session.start();
}

boot();
